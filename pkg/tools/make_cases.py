"""Regenerate the shipped JSON cases under src/wccopf/data/."""
import json
from pathlib import Path

DATA = Path(__file__).resolve().parents[1] / "src" / "wccopf" / "data"

# (from, to, reactance p.u., rating MW) on 1-based bus numbers
RTS_BRANCHES = [
    (1, 2, 0.0139, 175), (1, 3, 0.2112, 175), (1, 5, 0.0845, 175), (2, 4, 0.1267, 175),
    (2, 6, 0.1920, 175), (3, 9, 0.1190, 175), (3, 24, 0.0839, 400), (4, 9, 0.1037, 175),
    (5, 10, 0.0883, 175), (6, 10, 0.0605, 175), (7, 8, 0.0614, 175), (8, 9, 0.1651, 175),
    (8, 10, 0.1651, 175), (9, 11, 0.0839, 400), (9, 12, 0.0839, 400), (10, 11, 0.0839, 400),
    (10, 12, 0.0839, 400), (11, 13, 0.0476, 500), (11, 14, 0.0418, 500), (12, 13, 0.0476, 500),
    (12, 23, 0.0966, 500), (13, 23, 0.0865, 500), (14, 16, 0.0389, 500), (15, 16, 0.0173, 500),
    (15, 21, 0.0490, 500), (15, 21, 0.0490, 500), (15, 24, 0.0519, 500), (16, 17, 0.0259, 500),
    (16, 19, 0.0231, 500), (17, 18, 0.0144, 500), (17, 22, 0.1053, 500), (18, 21, 0.0259, 500),
    (18, 21, 0.0259, 500), (19, 20, 0.0396, 500), (19, 20, 0.0396, 500), (20, 23, 0.0216, 500),
    (20, 23, 0.0216, 500), (21, 22, 0.0678, 500),
]
LOADS = {1: 108, 2: 97, 3: 180, 4: 74, 5: 71, 6: 136, 7: 125, 8: 171, 9: 175, 10: 195,
         13: 265, 14: 194, 15: 317, 16: 100, 18: 333, 19: 181, 20: 128}
# synthetic aggregate units: bus -> (cost $/MWh, p_max MW)
GENS = {1: (21.0, 192), 2: (21.5, 192), 7: (30.0, 300), 13: (24.0, 591), 15: (17.0, 215),
        16: (12.0, 155), 18: (5.0, 400), 21: (5.5, 400), 22: (1.0, 300), 23: (10.0, 660)}
WIND = {8: 125.0, 15: 175.0}
LIMIT_FACTOR = 0.8


def rts24():
    return {
        "name": "rts24-synthetic",
        "buses": 24,
        "slack_bus": 12,
        "base_mva": 100.0,
        "lines": [
            {"from": f - 1, "to": t - 1, "susceptance": round(1.0 / x, 6),
             "limit_mw": LIMIT_FACTOR * r}
            for f, t, x, r in RTS_BRANCHES
        ],
        "generators": [
            {"bus": b - 1, "cost": c, "p_min": 0.0, "p_max": float(pmax)}
            for b, (c, pmax) in sorted(GENS.items())
        ],
        "wind": [{"bus": b - 1, "forecast_mw": f} for b, f in sorted(WIND.items())],
        "demand": [{"bus": b - 1, "mw": float(mw)} for b, mw in sorted(LOADS.items())],
    }


def toy3():
    return {
        "name": "toy3",
        "buses": 3,
        "slack_bus": 2,
        "base_mva": 100.0,
        "lines": [
            {"from": 0, "to": 1, "susceptance": 10.0, "limit_mw": 100.0},
            {"from": 1, "to": 2, "susceptance": 10.0, "limit_mw": 200.0},
            {"from": 0, "to": 2, "susceptance": 10.0, "limit_mw": 200.0},
        ],
        "generators": [
            {"bus": 0, "cost": 10.0, "p_min": 0.0, "p_max": 250.0},
            {"bus": 2, "cost": 30.0, "p_min": 0.0, "p_max": 250.0},
        ],
        "wind": [{"bus": 0, "forecast_mw": 40.0}, {"bus": 1, "forecast_mw": 60.0}],
        "demand": [{"bus": 1, "mw": 250.0}],
    }


def tail3():
    # one congested corridor out of the wind bus; the bus-1 unit is the only
    # local source of balancing headroom and it is expensive
    return {
        "name": "tail3",
        "buses": 3,
        "slack_bus": 2,
        "base_mva": 100.0,
        "lines": [
            {"from": 0, "to": 1, "susceptance": 10.0, "limit_mw": 97.0},
            {"from": 1, "to": 2, "susceptance": 10.0, "limit_mw": 500.0},
            {"from": 0, "to": 2, "susceptance": 10.0, "limit_mw": 500.0},
        ],
        "generators": [
            {"bus": 0, "cost": 10.0, "p_min": 0.0, "p_max": 235.0},
            {"bus": 1, "cost": 27.0, "p_min": 0.0, "p_max": 93.0},
            {"bus": 2, "cost": 30.0, "p_min": 0.0, "p_max": 500.0},
        ],
        "wind": [{"bus": 0, "forecast_mw": 60.0}, {"bus": 1, "forecast_mw": 60.0}],
        "demand": [{"bus": 1, "mw": 300.0}],
    }


if __name__ == "__main__":
    DATA.mkdir(parents=True, exist_ok=True)
    for name, doc in (("rts24_synthetic", rts24()), ("toy3", toy3()), ("tail3", tail3())):
        (DATA / f"{name}.json").write_text(json.dumps(doc, indent=2) + "\n")
        print("wrote", name)
