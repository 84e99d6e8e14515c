"""Multi-view grid-world VQA generator.

A scene is a ``4 x 4Q`` grid of cells, each empty or holding one coloured
shape. View ``k`` is the ``4 x 4`` window over columns ``4k .. 4k+3`` and is
rendered as a 16 x 16 image (one 4 x 4 pixel block per cell). Each sample
reasons view by view, one step per view, and ends with an aggregation step.

Families:

* ``count``               - how many objects of a colour
* ``relative_position``   - is object A left or right of object B
* ``appearance_order``    - order in which three objects first appear when
  scanning views in index order, columns left to right within a view
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..images import Image
from ..seeding import rng_for
from .schema import ReasoningSample, Step
from .vocab import COLORS, SHAPES

FAMILIES = ("count", "relative_position", "appearance_order")
ROWS = VIEW_COLS = 4
CELL = 4
SIDE = VIEW_COLS * CELL

BACKGROUND = (200, 200, 200)
RGB = {"red": (220, 30, 30), "green": (30, 170, 40), "blue": (30, 60, 220), "yellow": (230, 210, 30)}
MASKS = {
    "square": ["1111", "1111", "1111", "1111"],
    "disk": ["0110", "1111", "1111", "0110"],
    "triangle": ["0000", "0110", "1111", "1111"],
}


@dataclass
class SceneSpec:
    n_views: int
    cells: dict  # (row, global_col) -> (color, shape)

    @property
    def n_cols(self) -> int:
        return self.n_views * VIEW_COLS

    def view_of(self, col: int) -> int:
        return col // VIEW_COLS

    def to_rows(self) -> list[str]:
        """Compact text form: one string per grid row, ``..`` for empty, else colour+shape initials."""
        rows = []
        for r in range(ROWS):
            row = []
            for c in range(self.n_cols):
                obj = self.cells.get((r, c))
                row.append(".." if obj is None else obj[0][0] + obj[1][0])
            rows.append(" ".join(row))
        return rows

    @classmethod
    def from_rows(cls, rows) -> "SceneSpec":
        col_code = {c[0]: c for c in COLORS}
        shape_code = {s[0]: s for s in SHAPES}
        cells = {}
        for r, line in enumerate(rows):
            for c, tok in enumerate(line.split()):
                if tok != "..":
                    cells[(r, c)] = (col_code[tok[0]], shape_code[tok[1]])
        return cls(len(rows[0].split()) // VIEW_COLS, cells)


def render_view(scene: SceneSpec, view: int) -> np.ndarray:
    px = np.empty((SIDE, SIDE, 3), dtype=np.uint8)
    px[:] = BACKGROUND
    for (r, c), (color, shape) in scene.cells.items():
        if scene.view_of(c) != view:
            continue
        lc = c - view * VIEW_COLS
        mask = np.array([[ch == "1" for ch in row] for row in MASKS[shape]])
        block = px[r * CELL:(r + 1) * CELL, lc * CELL:(lc + 1) * CELL]
        block[mask] = RGB[color]
    return px.astype(np.float64) / 255.0


def name(obj) -> str:
    return f"{obj[0]} {obj[1]}"


def _free_cell(rng, scene: SceneSpec, view: int | None = None):
    while True:
        c = int(rng.integers(scene.n_cols)) if view is None else view * VIEW_COLS + int(rng.integers(VIEW_COLS))
        r = int(rng.integers(ROWS))
        if (r, c) not in scene.cells:
            return r, c


def _scan_order(scene: SceneSpec, objs) -> list:
    """Sort (row, col) locations by view, then column, then row."""
    return sorted(objs, key=lambda rc: (scene.view_of(rc[1]), rc[1], rc[0]))


def _list_phrase(objs) -> str:
    names = [f"the {name(o)}" for o in objs]
    if len(names) == 1:
        return names[0]
    return " , ".join(names[:-1]) + " and " + names[-1]


def _describe_count(scene, query):
    color = query["color"]
    per_view = [sum(1 for (r, c), o in scene.cells.items() if o[0] == color and scene.view_of(c) == v)
                for v in range(scene.n_views)]
    total = sum(per_view)
    question = f"how many {color} objects are there ?"
    steps = [Step(f"view {v} shows {n} {color} objects .", v) for v, n in enumerate(per_view)]
    steps.append(Step(f"so there are {total} {color} objects in total .", 0))
    return question, steps, str(total)


def _find(scene, obj):
    return next(rc for rc, o in scene.cells.items() if o == obj)


def _describe_relative(scene, query):
    a, b = tuple(query["a"]), tuple(query["b"])
    la, lb = _find(scene, a), _find(scene, b)
    steps = []
    for v in range(scene.n_views):
        parts = [f"the {name(o)} at column {loc[1]}" for o, loc in ((a, la), (b, lb)) if scene.view_of(loc[1]) == v]
        if parts:
            steps.append(Step(f"view {v} shows " + " and ".join(parts) + " .", v))
        else:
            steps.append(Step(f"view {v} shows neither object .", v))
    side = "left" if la[1] < lb[1] else "right"
    steps.append(Step(f"so the {name(a)} is {side} of the {name(b)} .", 0))
    question = f"is the {name(a)} left or right of the {name(b)} ?"
    return question, steps, side


def _describe_order(scene, query):
    objs = [tuple(o) for o in query["objects"]]
    locs = [_find(scene, o) for o in objs]
    order = [scene.cells[rc] for rc in _scan_order(scene, locs)]
    steps = []
    for v in range(scene.n_views):
        here = [scene.cells[rc] for rc in _scan_order(scene, [rc for rc in locs if scene.view_of(rc[1]) == v])]
        text = f"view {v} shows {_list_phrase(here)} ." if here else f"view {v} shows none of them ."
        steps.append(Step(text, v))
    answer = " , ".join(name(o) for o in order)
    steps.append(Step(f"so the order is {answer} .", 0))
    question = f"in what order do the {name(objs[0])} , the {name(objs[1])} and the {name(objs[2])} first appear ?"
    return question, steps, answer


def _scene_count(rng, q):
    scene = SceneSpec(q, {})
    color = COLORS[int(rng.integers(len(COLORS)))]
    for v in range(q):
        for _ in range(int(rng.integers(0, 4))):
            c = color if rng.random() < 0.5 else COLORS[int(rng.integers(len(COLORS)))]
            scene.cells[_free_cell(rng, scene, v)] = (c, SHAPES[int(rng.integers(len(SHAPES)))])
    return scene, {"color": color}


def _unique_objects(rng, k):
    combos = [(c, s) for c in COLORS for s in SHAPES]
    pick = rng.choice(len(combos), size=k, replace=False)
    return [combos[int(i)] for i in pick]


def _add_distractors(rng, scene, avoid, max_per_view=2):
    combos = [(c, s) for c in COLORS for s in SHAPES if (c, s) not in avoid]
    for v in range(scene.n_views):
        for _ in range(int(rng.integers(0, max_per_view + 1))):
            scene.cells[_free_cell(rng, scene, v)] = combos[int(rng.integers(len(combos)))]


def _scene_relative(rng, q):
    scene = SceneSpec(q, {})
    a, b = _unique_objects(rng, 2)
    while True:
        la, lb = _free_cell(rng, scene), _free_cell(rng, scene)
        if la[1] != lb[1]:
            break
    scene.cells[la], scene.cells[lb] = a, b
    _add_distractors(rng, scene, {a, b})
    return scene, {"a": list(a), "b": list(b)}


def _scene_order(rng, q):
    scene = SceneSpec(q, {})
    objs = _unique_objects(rng, 3)
    for o in objs:
        scene.cells[_free_cell(rng, scene)] = o
    _add_distractors(rng, scene, set(objs))
    return scene, {"objects": [list(o) for o in objs]}


_SCENES = {"count": _scene_count, "relative_position": _scene_relative, "appearance_order": _scene_order}
_DESCRIBE = {"count": _describe_count, "relative_position": _describe_relative, "appearance_order": _describe_order}


def sample_from_scene(scene: SceneSpec, family: str, query: dict, sample_id: str) -> ReasoningSample:
    """Render views and write the templated question, steps and answer.

    Step targets are left unassigned; the true per-step views go to
    ``meta["true_targets"]``.
    """
    question, steps, answer = _DESCRIBE[family](scene, query)
    images = [Image(render_view(scene, v), v, sample_id) for v in range(scene.n_views)]
    meta = {"scene": scene.to_rows(), "query": query, "true_targets": [s.target_image for s in steps]}
    return ReasoningSample(sample_id, images, question, [Step(s.text, None) for s in steps], answer,
                           "multi", None, family, meta)


def generate_synthetic(n: int, families=FAMILIES, seed: int = 0, views=(2, 4),
                       prefix: str = "syn") -> list[ReasoningSample]:
    """Generate ``n`` multi-view samples; families rotate by sample index."""
    families = list(families)
    for f in families:
        if f not in _SCENES:
            raise ValueError(f"unknown family {f!r}; choose from {FAMILIES}")
    out = []
    for i in range(n):
        rng = rng_for(seed, f"sample-{i}")
        q = int(rng.integers(views[0], views[1] + 1))
        family = families[i % len(families)]
        scene, query = _SCENES[family](rng, q)
        out.append(sample_from_scene(scene, family, query, f"{prefix}{seed}-{i:06d}"))
    return out
