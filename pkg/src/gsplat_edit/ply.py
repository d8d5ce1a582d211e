"""Binary little-endian PLY I/O for Gaussian scenes.

Schema (version tag "gsplat-edit v1"): one "vertex" element per Gaussian
with float32 properties x, y, z, scale_0..2 (log-scales), rot_0..3
(wxyz quaternion), opacity (logit), f_dc_0..2 (RGB), then uchar label
and int32 generation. 61 bytes per row.

The parser is strict: unknown properties, extra elements, or non-finite
values are rejected with the byte offset (and element index where it
applies) rather than silently preserved.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError
from .scene import GaussianScene

MAGIC_COMMENT = "gsplat-edit v1"

_FLOAT_PROPS = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
                "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
                "f_dc_0", "f_dc_1", "f_dc_2"]

_ROW_DTYPE = np.dtype([(name, "<f4") for name in _FLOAT_PROPS]
                      + [("label", "u1"), ("generation", "<i4")])

_EXPECTED_PROPS = [("float", p) for p in _FLOAT_PROPS] \
    + [("uchar", "label"), ("int", "generation")]


def save_scene(scene: GaussianScene, path) -> None:
    n = len(scene)
    header_lines = ["ply", "format binary_little_endian 1.0",
                    f"comment {MAGIC_COMMENT}", f"element vertex {n}"]
    header_lines += [f"property {t} {name}" for t, name in _EXPECTED_PROPS]
    header_lines.append("end_header")
    header = ("\n".join(header_lines) + "\n").encode("ascii")

    rows = np.empty(n, dtype=_ROW_DTYPE)
    for axis, name in enumerate(("x", "y", "z")):
        rows[name] = scene.positions[:, axis].astype(np.float32)
    for axis in range(3):
        rows[f"scale_{axis}"] = scene.log_scales[:, axis].astype(np.float32)
    for axis in range(4):
        rows[f"rot_{axis}"] = scene.rotations[:, axis].astype(np.float32)
    rows["opacity"] = scene.opacity_logits.astype(np.float32)
    for axis in range(3):
        rows[f"f_dc_{axis}"] = scene.colors[:, axis].astype(np.float32)
    rows["label"] = scene.labels.astype(np.uint8)
    rows["generation"] = scene.generations.astype(np.int32)

    with open(path, "wb") as f:
        f.write(header)
        f.write(rows.tobytes())


def load_scene(path) -> GaussianScene:
    path = Path(path)
    blob = path.read_bytes()
    end_marker = b"end_header\n"
    end = blob.find(end_marker)
    if end < 0:
        raise ParseError(f"{path}: no end_header in PLY", offset=0)
    payload_start = end + len(end_marker)
    try:
        header_text = blob[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: non-ASCII PLY header", offset=0) from exc
    lines = header_text.splitlines()

    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}: missing 'ply' magic", offset=0)
    if len(lines) < 2 or lines[1].strip() != "format binary_little_endian 1.0":
        raise ParseError(f"{path}: format must be binary_little_endian 1.0",
                         offset=len(lines[0]) + 1)

    count = None
    props: list[tuple[str, str]] = []
    offset = 0
    for line in lines:
        stripped = line.strip()
        if stripped.startswith("comment"):
            pass
        elif stripped.startswith("element"):
            parts = stripped.split()
            if count is not None or len(parts) != 3 or parts[1] != "vertex":
                raise ParseError(
                    f"{path}: expected a single 'element vertex N', got "
                    f"{stripped!r}", offset=offset)
            try:
                count = int(parts[2])
            except ValueError as exc:
                raise ParseError(f"{path}: bad vertex count {parts[2]!r}",
                                 offset=offset) from exc
        elif stripped.startswith("property"):
            parts = stripped.split()
            if len(parts) != 3:
                raise ParseError(f"{path}: malformed property line "
                                 f"{stripped!r}", offset=offset)
            props.append((parts[1], parts[2]))
        offset += len(line) + 1

    if count is None:
        raise ParseError(f"{path}: header lacks an element line", offset=0)
    if props != _EXPECTED_PROPS:
        unknown = [p for p in props if p not in _EXPECTED_PROPS]
        if unknown:
            raise ParseError(
                f"{path}: unknown PLY properties {unknown}; this reader "
                f"rejects properties outside the gsplat-edit v1 schema",
                offset=0)
        raise ParseError(
            f"{path}: property list does not match the gsplat-edit v1 "
            f"schema (got {props})", offset=0)

    expected_bytes = count * _ROW_DTYPE.itemsize
    available = len(blob) - payload_start
    if available < expected_bytes:
        raise ParseError(
            f"{path}: payload truncated, need {expected_bytes} bytes for "
            f"{count} vertices, have {available}", offset=payload_start)

    rows = np.frombuffer(blob, dtype=_ROW_DTYPE, count=count,
                         offset=payload_start)

    float_block = np.stack([rows[name].astype(np.float64)
                            for name in _FLOAT_PROPS], axis=1)
    bad = ~np.isfinite(float_block)
    if bad.any():
        elem = int(np.nonzero(bad.any(axis=1))[0][0])
        field = int(np.nonzero(bad[elem])[0][0])
        raise ParseError(
            f"{path}: non-finite value in property "
            f"'{_FLOAT_PROPS[field]}'",
            offset=payload_start + elem * _ROW_DTYPE.itemsize + field * 4,
            element=elem)

    generations = rows["generation"].astype(np.int64)
    scene = GaussianScene(
        positions=float_block[:, 0:3],
        log_scales=float_block[:, 3:6],
        rotations=float_block[:, 6:10],
        opacity_logits=float_block[:, 10],
        colors=float_block[:, 11:14],
        labels=rows["label"].astype(bool),
        backproj_weights=np.zeros(count),
        generations=generations,
        current_generation=int(generations.max()) if count else 0,
    )
    return scene
