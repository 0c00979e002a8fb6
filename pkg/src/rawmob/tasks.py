"""Downstream task definitions over generator labels and region properties."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError
from .world import POI_TYPES


@dataclass(frozen=True)
class Task:
    name: str
    target: str  # "user" or "region"
    kind: str
    label: Callable
    n_classes: int | None = None


TASKS = {
    "commuter": Task("commuter", "user", "classification", lambda lab: int(lab.is_commuter), 2),
    "trip_count": Task("trip_count", "user", "regression", lambda lab: float(lab.subway_trip_count)),
    "car_service": Task("car_service", "region", "regression", lambda props: float(props["car_service_count"])),
    "poi_most": Task("poi_most", "region", "classification",
                     lambda props: POI_TYPES.index(props["poi_most_type"]), len(POI_TYPES)),
}


def get_task(name: str) -> Task:
    try:
        return TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


def task_labels(task: Task, ids, labels: dict | None = None, regions=None) -> np.ndarray:
    """Labels aligned with ``ids`` from a user label table or a region list."""
    if task.target == "user":
        if labels is None:
            raise ConfigError(f"task {task.name!r} needs a user label file")
        source = labels
    else:
        if regions is None:
            raise ConfigError(f"task {task.name!r} needs a region file")
        source = {r.region_id: r.properties for r in regions}
    missing = [i for i in ids if i not in source]
    if missing:
        raise ConfigError(f"no {task.target} labels for {len(missing)} ids, e.g. {missing[0]!r}")
    dtype = np.int64 if task.kind == "classification" else np.float64
    return np.array([task.label(source[i]) for i in ids], dtype=dtype)
