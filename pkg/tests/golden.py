"""Forty handcrafted participants with hand-derived endpoint labels.

Dates were worked out by hand, not with the package:
enrollment 2019-06-01 gives the mark 2021-05-31 and window
[2021-03-02, 2021-11-27]; window start is enrollment + 640 days.

Columns of ``EXPECTED``: primary at 400 copies/mL, primary at 50, secondary
(transfers included, no enrollment cutoff) at 400.  ``ENGAGEMENT`` holds
(engaged_2y, retained, lapse_time) for the contact-pattern rows.
"""
from datetime import date, timedelta

from clustertmle.trial_data import ClinicRecord, ParticipantRecord

E = date(2019, 6, 1)
MARK = date(2021, 5, 31)
START_OFFSET = 640


def d(s):
    return date.fromisoformat(s)


def _p(pid, enroll=E, clinic="K1", **kw):
    return ParticipantRecord(pid, clinic, enroll, 19, "female", "Kenya", **kw)


def _contacts(*offsets):
    return tuple(E + timedelta(days=o) for o in offsets)


SUPP = ((MARK, 20.0),)

RECORDS = [
    _p("g01", viral_loads=((MARK, 350.0),)),
    _p("g02", viral_loads=((MARK, 400.0),)),
    _p("g03", viral_loads=((MARK, 399.0),)),
    _p("g04", viral_loads=((MARK, 49.0),)),
    _p("g05", viral_loads=((MARK, 50.0),)),
    _p("g06", viral_loads=((d("2021-03-02"), 20.0),)),
    _p("g07", viral_loads=((d("2021-03-01"), 20.0),)),
    _p("g08", viral_loads=((d("2021-11-27"), 20.0),)),
    _p("g09", viral_loads=((d("2021-11-28"), 20.0),)),
    # closest to the mark wins (+20 days beats -31 days)
    _p("g10", viral_loads=((d("2021-04-30"), 1000.0), (d("2021-06-20"), 100.0))),
    # equidistant (-10 / +10): the earlier one wins
    _p("g11", viral_loads=((d("2021-05-21"), 1000.0), (d("2021-06-10"), 100.0))),
    _p("g12", death_date=d("2021-01-15")),
    _p("g13", death_date=d("2021-12-15")),
    _p("g14", viral_loads=((d("2021-03-10"), 100.0),), death_date=d("2021-04-01")),
    _p("g15", viral_loads=((MARK, 20.0),), death_date=MARK),
    _p("g16", withdrawal_date=d("2020-01-01"), viral_loads=SUPP),
    _p("g17", outmigration_date=d("2020-08-01"), viral_loads=SUPP),
    _p("g18", transfer_date=d("2020-09-01")),
    _p("g19", outmigration_date=d("2021-12-10"), viral_loads=SUPP),
    _p("g20", enroll=d("2019-11-30"), viral_loads=((d("2021-11-29"), 100.0),)),
    _p("g21", enroll=d("2019-12-01"), viral_loads=((d("2022-03-01"), 100.0),)),
    _p("g22", enroll=d("2019-12-15"), viral_loads=((d("2022-03-02"), 20.0),)),
    _p("g23", enroll=d("2020-03-01"), viral_loads=((d("2021-12-01"), 600.0),)),
    _p("g24", enroll=d("2021-06-01"), viral_loads=((d("2022-01-10"), 20.0),)),
    _p("g25", viral_loads=((d("2021-06-01"), 5000.0),), death_date=d("2021-07-01")),
    _p("g26", death_date=d("2021-08-01")),
    _p("g27", transfer_date=d("2020-10-01"), viral_loads=SUPP),
    _p("g28", enroll=d("2020-01-10"), withdrawal_date=d("2020-05-01")),
    _p("g29", outmigration_date=d("2020-07-01"), transfer_date=d("2020-06-01"),
       viral_loads=((MARK, 900.0),)),
    _p("g30", outmigration_date=d("2021-02-01"), death_date=d("2021-04-01")),
    # contact patterns (all suppressed at the mark)
    _p("g31", contact_dates=_contacts(120, 240, 360, 480, 600), viral_loads=SUPP),
    _p("g32", contact_dates=_contacts(100, 221, 341, 461, 581), viral_loads=SUPP),
    _p("g33", contact_dates=_contacts(120, 240, 360, 480), viral_loads=SUPP),
    _p("g34", contact_dates=_contacts(120, 240, 360, 457), viral_loads=SUPP),
    _p("g35", contact_dates=_contacts(120, 240, 360, 456), viral_loads=SUPP),
    _p("g36", contact_dates=_contacts(490), viral_loads=SUPP),
    _p("g37", viral_loads=SUPP),
    _p("g38", contact_dates=_contacts(120, 240, 360, 640), viral_loads=SUPP),
    _p("g39", contact_dates=_contacts(121, 241, 361, 481, 601), viral_loads=SUPP),
    _p("g40", contact_dates=_contacts(700), viral_loads=SUPP),
]

S, U, D, M = "Suppressed", "Unsuppressed", "Died", "MissingVL"
XO, XT, XW, XL = ("ExcludedOutmigrated", "ExcludedTransferred", "ExcludedWithdrawn",
                  "ExcludedLateEnrollment")

EXPECTED = {
    "g01": (S, U, S), "g02": (U, U, U), "g03": (S, U, S), "g04": (S, S, S), "g05": (S, U, S),
    "g06": (S, S, S), "g07": (M, M, M), "g08": (S, S, S), "g09": (M, M, M), "g10": (S, U, S),
    "g11": (U, U, U), "g12": (D, D, D), "g13": (M, M, M), "g14": (S, U, S), "g15": (D, D, D),
    "g16": (XW, XW, XW), "g17": (XO, XO, S), "g18": (XT, XT, M), "g19": (S, S, S),
    "g20": (S, U, S), "g21": (XL, XL, S), "g22": (XL, XL, M), "g23": (XL, XL, U),
    "g24": (XL, XL, XL), "g25": (U, U, U), "g26": (D, D, D), "g27": (XT, XT, S),
    "g28": (XW, XW, XW), "g29": (XO, XO, U), "g30": (XO, XO, D),
    **{f"g{i}": (S, S, S) for i in range(31, 41)},
}

ENGAGEMENT = {
    "g31": (True, True, None),
    "g32": (True, False, 221),
    "g33": (True, False, 640),
    "g34": (True, False, 640),
    "g35": (False, False, 640),
    "g36": (True, False, 490),
    "g37": (False, False, 640),
    "g38": (False, False, 640),
    "g39": (True, False, 121),
    "g40": (False, False, 640),
}

CLINICS = [ClinicRecord("K1", "Kenya", 1, "s1", 100, 0.7),
           ClinicRecord("K2", "Kenya", 0, "s1", 120, 0.6)]
