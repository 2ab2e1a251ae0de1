"""Regenerate the bundled synthetic trial under src/clustertmle/data/synthetic."""
from pathlib import Path

from clustertmle.simulate import BUNDLED_SPEC, synth_trial
from clustertmle.trial_data import write_trial

if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "clustertmle" / "data" / "synthetic"
    write_trial(synth_trial(BUNDLED_SPEC, 0), out)
    print(f"wrote {out}")
