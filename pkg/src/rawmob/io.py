"""Line-delimited JSON and GeoJSON readers and writers for trajectories, labels and regions."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ContractError, FormatError
from .trajectory import RawTrajectory, Region
from .world import UserLabel


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _records(path):
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield ln, json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{ln}: {exc.msg}") from None


def write_trajectories(path, trajs: Iterable[RawTrajectory]) -> None:
    with open(path, "w") as fh:
        for t in trajs:
            pts = [[float(lon), float(lat), int(ts) if float(ts).is_integer() else float(ts)]
                   for lon, lat, ts in t.points]
            fh.write(_dump({"user_id": t.user_id, "points": pts}) + "\n")


def read_trajectories(path) -> list[RawTrajectory]:
    out = []
    for ln, rec in _records(path):
        try:
            out.append(RawTrajectory(str(rec["user_id"]), np.asarray(rec["points"], dtype=np.float64)))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ContractError):
                raise ContractError(f"{path}:{ln}: {exc}") from None
            raise FormatError(f"{path}:{ln}: bad trajectory record ({exc})") from None
    return out


def write_labels(path, labels: dict[str, UserLabel]) -> None:
    with open(path, "w") as fh:
        for uid, lab in labels.items():
            fh.write(_dump({"user_id": uid, "is_commuter": bool(lab.is_commuter),
                            "subway_trip_count": int(lab.subway_trip_count)}) + "\n")


def read_labels(path) -> dict[str, UserLabel]:
    out = {}
    for ln, rec in _records(path):
        try:
            count = int(rec["subway_trip_count"])
            if count < 0:
                raise ValueError("negative subway_trip_count")
            out[str(rec["user_id"])] = UserLabel(bool(rec["is_commuter"]), count)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}:{ln}: bad label record ({exc})") from None
    return out


def regions_to_geojson(regions: Iterable[Region]) -> dict:
    features = []
    for r in regions:
        props = {"region_id": r.region_id, **r.properties}
        if r.ring is not None:
            geom = {"type": "Polygon", "coordinates": [r.ring.tolist()]}
        else:
            geom = {"type": "Point", "coordinates": list(map(float, r.center))}
            props["radius_m"] = float(r.radius_m)
        features.append({"type": "Feature", "properties": props, "geometry": geom})
    return {"type": "FeatureCollection", "features": features}


def write_regions(path, regions: Iterable[Region]) -> None:
    Path(path).write_text(json.dumps(regions_to_geojson(regions), sort_keys=True, indent=1) + "\n")


def read_regions(path) -> list[Region]:
    try:
        doc = json.loads(Path(path).read_text())
        out = []
        for f in doc["features"]:
            props = dict(f.get("properties") or {})
            rid = str(props.pop("region_id"))
            geom = f["geometry"]
            if geom["type"] == "Polygon":
                out.append(Region(rid, ring=np.asarray(geom["coordinates"][0], dtype=np.float64), properties=props))
            elif geom["type"] == "Point":
                radius = float(props.pop("radius_m"))
                out.append(Region(rid, center=tuple(geom["coordinates"][:2]), radius_m=radius, properties=props))
            else:
                raise FormatError(f"{path}: unsupported geometry {geom['type']!r}")
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad region file ({exc})") from None
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
