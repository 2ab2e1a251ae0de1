"""Influence-curve standard errors, Student-t tests and effect scales."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats

SCALES = ("risk_ratio", "risk_difference", "mean_difference")


class EstimationError(RuntimeError):
    """An estimate cannot be formed from the data supplied."""


@dataclass(frozen=True)
class EffectEstimate:
    """Arm-specific endpoints and their contrast, with t-based inference.

    ``se`` is on the analysis scale: log scale for ratios.  ``p_one_sided``
    is oriented by ``direction`` so that small values favour the declared
    benefit.  ``p`` is the p-value of the test named by ``sided``.
    """

    psi1: float
    psi0: float
    effect: float
    scale: str
    se: float
    df: int
    ci: tuple[float, float]
    p_one_sided: float
    p_two_sided: float
    sided: str = "one"
    direction: str = "increase"
    selected: str = "none"
    weights: str = "equal"
    estimator: str = ""
    n_clusters: int = 0
    n_obs: int = 0
    psi1_ci: tuple[float, float] = (float("nan"), float("nan"))
    psi0_ci: tuple[float, float] = (float("nan"), float("nan"))
    flags: tuple[str, ...] = field(default=())

    @property
    def p(self) -> float:
        return self.p_one_sided if self.sided == "one" else self.p_two_sided

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci_lo"], d["ci_hi"] = d.pop("ci")
        d["psi1_ci_lo"], d["psi1_ci_hi"] = d.pop("psi1_ci")
        d["psi0_ci_lo"], d["psi0_ci_hi"] = d.pop("psi0_ci")
        d["flags"] = ";".join(self.flags)
        d["p"] = self.p
        return d


def ic_se(ic) -> tuple[float, bool]:
    """Standard error from per-unit influence values: sample sd / sqrt(n).

    Returns ``(se, degenerate)``; ``degenerate`` is true when all values are
    equal, so the SE is exactly zero.
    """
    ic = np.asarray(ic, dtype=float)
    if ic.size < 2:
        raise ValueError("need at least two influence-curve values")
    sd = ic.std(ddof=1)
    degenerate = bool(np.ptp(ic) == 0)
    return (0.0 if degenerate else float(sd / np.sqrt(ic.size))), degenerate


def t_quantile(df: float, prob: float) -> float:
    return float(stats.t.ppf(prob, df))


def t_inference(estimate: float, se: float, df: int, sided: str = "two", level: float = 0.95,
                null: float = 0.0, direction: str = "increase"):
    """CI and p-value for ``estimate`` against ``null``.

    ``sided="one"`` gives ``P(T_df > t)`` for ``direction="increase"`` and
    ``P(T_df < t)`` for ``"decrease"``.  The CI is always two-sided at
    ``level``.  Returns ``(ci, p, flags)``.
    """
    if se < 0 or df < 1:
        raise ValueError("se must be >= 0 and df >= 1")
    q = t_quantile(df, 1.0 - (1.0 - level) / 2.0)
    flags: tuple[str, ...] = ()
    diff = estimate - null
    if se == 0:
        flags = ("zero_se",)
        ci = (estimate, estimate)
        signed = diff if direction == "increase" else -diff
        p_one = 0.0 if signed > 0 else (0.5 if signed == 0 else 1.0)
        p_two = 1.0 if diff == 0 else 0.0
    else:
        ci = (estimate - q * se, estimate + q * se)
        tstat = diff / se
        upper = float(stats.t.sf(tstat, df))
        lower = float(stats.t.cdf(tstat, df))
        p_one = upper if direction == "increase" else lower
        p_two = min(1.0, 2.0 * min(upper, lower))
    p = p_one if sided == "one" else p_two
    return ci, p, flags


def transform_scale(psi1, psi0, ic1, ic0, scale: str):
    """Effect and its influence curve on the analysis scale.

    Differences use ``ic1 - ic0``; ratios are analysed on the log scale with
    delta-method influence ``ic1 / psi1 - ic0 / psi0``.  Returns
    ``(effect, analysis_value, analysis_ic)`` where ``analysis_value`` is the
    log ratio for ratios and the difference otherwise.
    """
    ic1 = np.asarray(ic1, dtype=float)
    ic0 = np.asarray(ic0, dtype=float)
    if scale in ("risk_difference", "mean_difference"):
        d = psi1 - psi0
        return d, d, ic1 - ic0
    if scale == "risk_ratio":
        if psi0 <= 0:
            raise EstimationError("control-arm estimate is 0: risk ratio undefined, use the difference scale")
        if psi1 <= 0:
            raise EstimationError("intervention-arm estimate is 0: log risk ratio undefined")
        return psi1 / psi0, float(np.log(psi1 / psi0)), ic1 / psi1 - ic0 / psi0
    raise ValueError(f"unknown scale {scale!r}")


def check_ratio_arms(y1, y0, scale: str) -> None:
    """Raise if an arm's observed outcomes are all zero under a ratio scale.

    Bounded predictions keep targeted arm estimates away from 0, so a zero
    arm has to be caught on the data.
    """
    if scale != "risk_ratio":
        return
    if np.all(np.asarray(y0, dtype=float) == 0):
        raise EstimationError("control-arm estimate is 0: risk ratio undefined, use the difference scale")
    if np.all(np.asarray(y1, dtype=float) == 0):
        raise EstimationError("intervention-arm estimate is 0: log risk ratio undefined")


def effect_from_ic(psi1: float, psi0: float, ic1, ic0, scale: str, df: int, *,
                   sided: str = "one", direction: str = "increase", level: float = 0.95,
                   **meta) -> EffectEstimate:
    """Assemble an :class:`EffectEstimate` from per-unit influence values.

    ``ic1``/``ic0`` must be at the independent-unit level (clusters), one
    value per unit, scaled so that ``se = sd / sqrt(n_units)``.
    """
    effect, value, ic = transform_scale(psi1, psi0, ic1, ic0, scale)
    se, degenerate = ic_se(ic)
    ci, _, tflags = t_inference(value, se, df, "two", level)
    _, p_one, _ = t_inference(value, se, df, "one", level, direction=direction)
    _, p_two, _ = t_inference(value, se, df, "two", level)
    if scale == "risk_ratio":
        ci = (float(np.exp(ci[0])), float(np.exp(ci[1])))
    arm_ci = []
    for psi, icx in ((psi1, ic1), (psi0, ic0)):
        s, _ = ic_se(icx)
        c, _, _ = t_inference(psi, s, df, "two", level)
        arm_ci.append((float(c[0]), float(c[1])))
    flags = tuple(meta.pop("flags", ())) + tflags + (("degenerate_ic",) if degenerate else ())
    return EffectEstimate(psi1=float(psi1), psi0=float(psi0), effect=float(effect), scale=scale,
                          se=se, df=int(df), ci=(float(ci[0]), float(ci[1])), p_one_sided=p_one,
                          p_two_sided=p_two, sided=sided, direction=direction,
                          psi1_ci=arm_ci[0], psi0_ci=arm_ci[1], flags=flags, **meta)
