"""Per-run record: tick telemetry, events, and Table-style totals.

Totals are always recomputed from the event stream, never accumulated on
the side, so the stored summary can be audited against the events file.

Timing definitions used for the summary statistics:

  * task time: start of the run to the last insertion;
  * surface cycle: first command (baseline) or first reach toward a
    surface's blocks, up to that surface's third insertion;
  * leading block: the same cycle start up to the surface's first
    insertion -- the single-block protocol, robot repositioning included;
  * block time: from the previous insertion (or the cycle start for the
    surface's first block) to this insertion.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

TELEMETRY_COLUMNS = (
    ["time"]
    + [f"q{i}" for i in range(6)]
    + [f"qd{i}" for i in range(6)]
    + [f"u{i}" for i in range(6)]
    + [f"us{i}" for i in range(6)]
    + ["D", "Ddot", "phi", "safety_triggered", "emergency"]
)


@dataclass
class Event:
    time: float
    kind: str
    payload: dict


@dataclass
class MetricsLog:
    scenario_name: str = ""
    seed: int = 0
    mode: str = ""
    telemetry: list[list[float]] = field(default_factory=list)
    events: list[Event] = field(default_factory=list)
    completed: bool = False

    def record_tick(self, time, q, qdot, u, u_safe, dist, ddot, phi,
                    triggered, emergency) -> None:
        row = ([time] + list(map(float, q)) + list(map(float, qdot))
               + list(map(float, u)) + list(map(float, u_safe))
               + [float(dist), float(ddot), float(phi),
                  float(bool(triggered)), float(bool(emergency))])
        self.telemetry.append(row)

    def record_event(self, time: float, kind: str, payload: dict | None = None) -> None:
        self.events.append(Event(float(time), kind, payload or {}))

    def events_of(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    # -- file output ---------------------------------------------------------

    def write_telemetry_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(TELEMETRY_COLUMNS)
            for row in self.telemetry:
                writer.writerow([repr(float(v)) for v in row])

    def write_events_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["time", "kind", "payload"])
            for e in self.events:
                writer.writerow([repr(e.time), e.kind,
                                 json.dumps(e.payload, sort_keys=True)])

    def write_summary_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(compute_totals(self), f, indent=2, sort_keys=True)
            f.write("\n")


def _surface_of(event: Event) -> int:
    return int(event.payload["surface"])


def compute_totals(log: MetricsLog) -> dict:
    """Recompute every summary figure from the event stream."""
    insertions = log.events_of("insertion")
    surface_done: dict[int, float] = {}
    first_insertion: dict[int, float] = {}
    counts: dict[int, int] = {}
    for e in insertions:
        s = _surface_of(e)
        counts[s] = counts.get(s, 0) + 1
        first_insertion.setdefault(s, e.time)
        if counts[s] == 3:
            surface_done[s] = e.time

    # a surface cycle starts at the first command or reach aimed at it
    # after every earlier-completed surface is done
    cycle_start: dict[int, float] = {}
    for e in log.events:
        if e.kind == "command" or e.kind == "reach_start":
            s = int(e.payload["surface"])
            if s not in cycle_start:
                cycle_start[s] = e.time

    surface_times = {s: surface_done[s] - cycle_start[s]
                     for s in surface_done if s in cycle_start}
    leading_block_times = {s: first_insertion[s] - cycle_start[s]
                           for s in first_insertion if s in cycle_start}

    block_times = []
    prev_by_surface: dict[int, float] = {}
    for e in insertions:
        s = _surface_of(e)
        start = prev_by_surface.get(s, cycle_start.get(s, 0.0))
        block_times.append(e.time - start)
        prev_by_surface[s] = e.time

    telem = np.asarray(log.telemetry) if log.telemetry else np.zeros((0, len(TELEMETRY_COLUMNS)))
    col = {name: i for i, name in enumerate(TELEMETRY_COLUMNS)}

    def stats(values):
        if not values:
            return {"avg": None, "std": None, "min": None, "max": None}
        arr = np.asarray(values, dtype=float)
        return {"avg": float(arr.mean()), "std": float(arr.std()),
                "min": float(arr.min()), "max": float(arr.max())}

    return {
        "scenario": log.scenario_name,
        "seed": log.seed,
        "mode": log.mode,
        "completed": bool(log.completed),
        "insertions": len(insertions),
        "task_time": insertions[-1].time if len(insertions) == 12 else None,
        "surface_times": {str(s): surface_times[s] for s in sorted(surface_times)},
        "leading_block_times": {str(s): leading_block_times[s]
                                for s in sorted(leading_block_times)},
        "block_times": block_times,
        "surface_stats": stats(list(surface_times.values())),
        "leading_block_stats": stats(list(leading_block_times.values())),
        "block_stats": stats(block_times),
        "min_distance": float(telem[:, col["D"]].min()) if len(telem) else None,
        "safety_trigger_ticks": int(telem[:, col["safety_triggered"]].sum()) if len(telem) else 0,
        "emergency_ticks": int(telem[:, col["emergency"]].sum()) if len(telem) else 0,
        "alerts": len(log.events_of("alert")),
        "ticks": len(log.telemetry),
    }


def recognition_leads(log: MetricsLog) -> list[float]:
    """Lead time between the correct intention call and grab completion.

    For every completed grab, the lead is measured from the first tick of
    that reach where the smoothed prediction named the grabbed block.
    """
    leads = []
    reach_start = None
    pred_lock: float | None = None
    target = None
    for e in log.events:
        if e.kind == "reach_start":
            reach_start = e.time
            target = e.payload["block"]
            pred_lock = None
        elif e.kind == "intention" and reach_start is not None:
            if e.payload.get("label") == f"R_{target}" and pred_lock is None:
                pred_lock = e.time
        elif e.kind == "grab_done" and reach_start is not None:
            if pred_lock is not None and e.payload["block"] == target:
                leads.append(e.time - pred_lock)
            reach_start = None
            pred_lock = None
    return leads
