"""Synthetic subject-composition world with exact ground truth.

Scenes live on a discrete grid; each subject is a colored shape occupying a
small connected footprint.  Rendering maps every cell to a fixed orthonormal
codevector, so decoding (nearest codeword + connected components) is exact
and the presence judge is a true oracle rather than a learned critic.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np


class WorldError(Exception):
    """Base class for world errors."""


class GenerationError(WorldError):
    """Could not place the requested subjects after bounded retries."""


# footprint patterns by shape, as (dr, dc) offsets from the anchor cell
SHAPE_PATTERNS: dict[int, tuple[tuple[int, int], ...]] = {
    0: ((0, 0),),  # dot
    1: ((0, 0), (0, 1), (1, 0), (1, 1)),  # block
    2: ((0, 0), (1, 0), (1, 1)),  # wedge
}

SHAPE_NAMES = ["dot", "block", "wedge"]
COLOR_NAMES = ["red", "green", "blue", "yellow"]
POSITION_NAMES = ["left", "right", "top", "bottom"]

TASKS = [
    "composition_single",
    "composition_multi",
    "distinction_cross",
    "distinction_intra",
    "distcomp_cross",
    "distcomp_intra",
]
SINGLE_CANDIDATE_TASKS = ("composition_single", "composition_multi")
MULTI_CANDIDATE_TASKS = ("distinction_cross", "distinction_intra", "distcomp_cross", "distcomp_intra")

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Subject:
    shape_id: int
    color_id: int
    anchor: tuple[int, int]
    footprint: frozenset[tuple[int, int]]

    def key(self):
        return (self.shape_id, self.color_id, self.anchor, tuple(sorted(self.footprint)))


@dataclass
class Scene:
    grid_size: tuple[int, int]
    subjects: list[Subject] = field(default_factory=list)
    background: int = 0

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.grid_size == other.grid_size
            and self.background == other.background
            and sorted(s.key() for s in self.subjects) == sorted(s.key() for s in other.subjects)
        )

    def occupied(self) -> dict[tuple[int, int], Subject]:
        out = {}
        for s in self.subjects:
            for cell in s.footprint:
                out[cell] = s
        return out


@dataclass(frozen=True)
class SubjectQuery:
    """Presence predicate over (shape, color)."""

    shape_id: int
    color_id: int

    def matches(self, subject: Subject) -> bool:
        return subject.shape_id == self.shape_id and subject.color_id == self.color_id


@dataclass(frozen=True)
class Selector:
    """How the instruction picks one subject inside one reference scene.

    cue is "color" (shape+color identify the subject) or a position word
    ("left"/"right"/"top"/"bottom": the extreme same-shape candidate).
    """

    ref_index: int
    shape_id: int
    cue: str
    color_id: int  # always the ground-truth color, even for position cues

    def select(self, scene: Scene) -> list[Subject]:
        candidates = [s for s in scene.subjects if s.shape_id == self.shape_id]
        if self.cue == "color":
            return [s for s in candidates if s.color_id == self.color_id]
        if not candidates:
            return []
        axis = {"left": (1, min), "right": (1, max), "top": (0, min), "bottom": (0, max)}[self.cue]
        dim, pick = axis
        extreme = pick(s.anchor[dim] for s in candidates)
        return [s for s in candidates if s.anchor[dim] == extreme]


@dataclass
class Sample:
    references: list[Scene]
    instruction: list[int]
    target: Scene
    task: str
    target_subjects: list[tuple[int, Subject]]  # (reference index, subject)
    distractor_subjects: list[tuple[int, Subject]]
    selectors: list[Selector]
    sample_id: int = 0


class World:
    """Geometry, codebook, and instruction vocabulary for one configuration."""

    def __init__(self, grid_size: tuple[int, int] = (6, 6), n_shapes: int = 3, n_colors: int = 4):
        if n_shapes > len(SHAPE_PATTERNS):
            raise WorldError(f"at most {len(SHAPE_PATTERNS)} shapes available")
        if n_colors > len(COLOR_NAMES):
            raise WorldError(f"at most {len(COLOR_NAMES)} colors available")
        self.grid_size = tuple(grid_size)
        self.n_shapes = n_shapes
        self.n_colors = n_colors
        # cell class 0 is background; class 1 + s*n_colors + c is shape s in color c
        self.n_classes = 1 + n_shapes * n_colors
        self.codebook = np.eye(self.n_classes, dtype=np.float64)

        # closed instruction vocabulary
        names = ["<bos>", "<eos>", "<and>"]
        self._color_base = len(names)
        names += COLOR_NAMES[:n_colors]
        self._shape_base = len(names)
        names += SHAPE_NAMES[:n_shapes]
        self._pos_base = len(names)
        names += POSITION_NAMES
        self._img_base = len(names)
        names += [f"<img{k}>" for k in range(4)]
        self.token_names = names
        self.vocab_size = len(names)
        self.bos, self.eos, self.sep = 0, 1, 2

    # -- vocabulary ----------------------------------------------------------

    def color_token(self, c: int) -> int:
        return self._color_base + c

    def shape_token(self, s: int) -> int:
        return self._shape_base + s

    def position_token(self, name: str) -> int:
        return self._pos_base + POSITION_NAMES.index(name)

    def image_token(self, k: int) -> int:
        return self._img_base + k

    def cell_class(self, shape_id: int, color_id: int) -> int:
        return 1 + shape_id * self.n_colors + color_id

    def class_attrs(self, cls: int) -> tuple[int, int]:
        if cls == 0:
            raise WorldError("background has no attributes")
        cls -= 1
        return cls // self.n_colors, cls % self.n_colors

    # -- codec ---------------------------------------------------------------

    def class_grid(self, scene: Scene) -> np.ndarray:
        rows, cols = scene.grid_size
        grid = np.zeros((rows, cols), dtype=np.int64)
        for s in scene.subjects:
            cls = self.cell_class(s.shape_id, s.color_id)
            for (r, c) in s.footprint:
                grid[r, c] = cls
        return grid

    def render(self, scene: Scene) -> np.ndarray:
        """Scene -> [R*C, n_classes] latents: one codevector per cell, row-major."""
        grid = self.class_grid(scene)
        return self.codebook[grid.reshape(-1)].copy()

    def decode(self, latents: np.ndarray, grid_size: tuple[int, int] | None = None) -> Scene:
        """Nearest-codeword classes, then 4-connected same-class components."""
        grid_size = tuple(grid_size or self.grid_size)
        rows, cols = grid_size
        latents = np.asarray(latents, dtype=np.float64)
        if latents.shape != (rows * cols, self.n_classes):
            raise WorldError(f"decode: expected latents of shape {(rows * cols, self.n_classes)}, got {latents.shape}")
        # orthonormal codebook: nearest by Euclidean distance == argmax dot product;
        # np.argmax breaks ties toward the lowest class id
        classes = np.argmax(latents @ self.codebook.T, axis=1).reshape(rows, cols)
        return self._scene_from_classes(classes)

    def _scene_from_classes(self, classes: np.ndarray) -> Scene:
        rows, cols = classes.shape
        seen = np.zeros((rows, cols), dtype=bool)
        subjects = []
        for r in range(rows):
            for c in range(cols):
                cls = classes[r, c]
                if cls == 0 or seen[r, c]:
                    continue
                stack = [(r, c)]
                seen[r, c] = True
                cells = []
                while stack:
                    rr, cc = stack.pop()
                    cells.append((rr, cc))
                    for nr, nc in ((rr - 1, cc), (rr + 1, cc), (rr, cc - 1), (rr, cc + 1)):
                        if 0 <= nr < rows and 0 <= nc < cols and not seen[nr, nc] and classes[nr, nc] == cls:
                            seen[nr, nc] = True
                            stack.append((nr, nc))
                shape_id, color_id = self.class_attrs(int(cls))
                subjects.append(
                    Subject(shape_id, color_id, anchor=min(cells), footprint=frozenset(cells))
                )
        subjects.sort(key=lambda s: s.anchor)
        return Scene(grid_size=(rows, cols), subjects=subjects)

    # -- presence oracle -----------------------------------------------------

    @staticmethod
    def judge_presence(scene: Scene, query: SubjectQuery) -> bool:
        return any(query.matches(s) for s in scene.subjects)

    # -- placement -----------------------------------------------------------

    def _placements(self, shape_id: int, grid_size: tuple[int, int]) -> list[frozenset[tuple[int, int]]]:
        rows, cols = grid_size
        pattern = SHAPE_PATTERNS[shape_id]
        out = []
        for r in range(rows):
            for c in range(cols):
                cells = [(r + dr, c + dc) for dr, dc in pattern]
                if all(0 <= rr < rows and 0 <= cc < cols for rr, cc in cells):
                    out.append(frozenset(cells))
        return out

    @staticmethod
    def _adjacent(a: frozenset, b: frozenset) -> bool:
        for (r, c) in a:
            for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if (nr, nc) in b:
                    return True
        return False

    def _compatible(self, subject: Subject, placed: list[Subject]) -> bool:
        for other in placed:
            if subject.footprint & other.footprint:
                return False
            # same-class adjacency would merge under decoding
            if (
                subject.shape_id == other.shape_id
                and subject.color_id == other.color_id
                and self._adjacent(subject.footprint, other.footprint)
            ):
                return False
        return True

    def random_scene(self, rng: np.random.Generator, n_subjects: int, max_tries: int = 200) -> Scene:
        """A valid random scene; subjects may repeat classes but never adjacently."""
        for _ in range(max_tries):
            placed: list[Subject] = []
            ok = True
            for _ in range(n_subjects):
                for _ in range(max_tries):
                    shape_id = int(rng.integers(self.n_shapes))
                    color_id = int(rng.integers(self.n_colors))
                    options = self._placements(shape_id, self.grid_size)
                    footprint = options[int(rng.integers(len(options)))]
                    cand = Subject(shape_id, color_id, anchor=min(footprint), footprint=footprint)
                    if self._compatible(cand, placed):
                        placed.append(cand)
                        break
                else:
                    ok = False
                    break
            if ok:
                placed.sort(key=lambda s: s.anchor)
                return Scene(grid_size=self.grid_size, subjects=placed)
        raise GenerationError(f"could not place {n_subjects} subjects on {self.grid_size}")

    def enumerate_scenes(self, grid_size: tuple[int, int], n_shapes: int, n_colors: int) -> list[Scene]:
        """Every valid scene (including the empty one) on a small grid."""
        pieces = []
        for shape_id in range(n_shapes):
            for color_id in range(n_colors):
                for footprint in self._placements(shape_id, grid_size):
                    pieces.append(Subject(shape_id, color_id, anchor=min(footprint), footprint=footprint))
        scenes: list[Scene] = []

        def extend(start: int, placed: list[Subject]) -> None:
            scenes.append(Scene(grid_size=grid_size, subjects=sorted(placed, key=lambda s: s.anchor)))
            for i in range(start, len(pieces)):
                if self._compatible(pieces[i], placed):
                    placed.append(pieces[i])
                    extend(i + 1, placed)
                    placed.pop()

        extend(0, [])
        return scenes

    # -- sample generation ---------------------------------------------------

    def gen_sample(self, task: str, seed: int, grid_size: tuple[int, int] | None = None) -> Sample:
        if task not in TASKS:
            raise WorldError(f"unknown task {task!r}")
        grid_size = tuple(grid_size or self.grid_size)
        rng = np.random.default_rng([seed, TASKS.index(task)])
        for _ in range(50):
            try:
                return self._gen_sample_once(task, rng, grid_size, seed)
            except GenerationError:
                continue
        raise GenerationError(f"infeasible placement for task {task} on grid {grid_size}")

    def _place_subjects(
        self,
        rng: np.random.Generator,
        grid_size: tuple[int, int],
        specs: list[tuple[int, int]],
        global_placed: list[Subject],
        max_tries: int = 100,
    ) -> list[Subject]:
        """Place (shape, color) specs avoiding every already-placed subject globally."""
        placed = []
        for shape_id, color_id in specs:
            options = self._placements(shape_id, grid_size)
            order = rng.permutation(len(options))
            for j in order[:max_tries]:
                cand = Subject(shape_id, color_id, anchor=min(options[j]), footprint=options[j])
                if self._compatible(cand, global_placed + placed):
                    placed.append(cand)
                    break
            else:
                raise GenerationError("no compatible placement")
        return placed

    def _distinct_specs(self, rng: np.random.Generator, n: int, same_shape: bool | None = None) -> list[tuple[int, int]]:
        """n distinct (shape, color) pairs; same_shape constrains the candidate set."""
        if same_shape:
            shape = int(rng.integers(self.n_shapes))
            if n > self.n_colors:
                raise GenerationError("not enough colors")
            colors = rng.choice(self.n_colors, size=n, replace=False)
            return [(shape, int(c)) for c in colors]
        if same_shape is False:
            if n > self.n_shapes:
                raise GenerationError("not enough shapes")
            shapes = rng.choice(self.n_shapes, size=n, replace=False)
            return [(int(s), int(rng.integers(self.n_colors))) for s in shapes]
        pairs = list(itertools.product(range(self.n_shapes), range(self.n_colors)))
        idx = rng.choice(len(pairs), size=n, replace=False)
        return [pairs[i] for i in idx]

    def _gen_sample_once(self, task: str, rng: np.random.Generator, grid_size, seed: int) -> Sample:
        used_specs: set[tuple[int, int]] = set()
        all_placed: list[Subject] = []

        def fresh_specs(n: int, same_shape=None) -> list[tuple[int, int]]:
            for _ in range(50):
                specs = self._distinct_specs(rng, n, same_shape)
                if not any(sp in used_specs for sp in specs):
                    used_specs.update(specs)
                    return specs
            raise GenerationError("spec collision")

        references: list[Scene] = []
        targets: list[tuple[int, Subject]] = []
        distractors: list[tuple[int, Subject]] = []
        selectors: list[Selector] = []

        def add_reference(specs: list[tuple[int, int]]) -> list[Subject]:
            subjects = self._place_subjects(rng, grid_size, specs, all_placed)
            all_placed.extend(subjects)
            references.append(Scene(grid_size=grid_size, subjects=sorted(subjects, key=lambda s: s.anchor)))
            return subjects

        if task == "composition_single":
            (subj,) = add_reference(fresh_specs(1))
            targets.append((0, subj))
            selectors.append(Selector(0, subj.shape_id, "color", subj.color_id))
        elif task == "composition_multi":
            n_refs = int(rng.integers(2, 4))
            for k in range(n_refs):
                (subj,) = add_reference(fresh_specs(1))
                targets.append((k, subj))
                selectors.append(Selector(k, subj.shape_id, "color", subj.color_id))
        elif task in ("distinction_cross", "distinction_intra"):
            n_cand = int(rng.integers(2, 4))
            same_shape = task == "distinction_intra"
            subjects = add_reference(fresh_specs(n_cand, same_shape=same_shape))
            pick = int(rng.integers(n_cand))
            for i, subj in enumerate(subjects):
                (targets if i == pick else distractors).append((0, subj))
            selectors.append(self._make_selector(rng, 0, references[0], subjects[pick]))
        else:  # distcomp_cross / distcomp_intra
            n_cand = int(rng.integers(2, 4))
            same_shape = task == "distcomp_intra"
            subjects = add_reference(fresh_specs(n_cand, same_shape=same_shape))
            pick = int(rng.integers(n_cand))
            for i, subj in enumerate(subjects):
                (targets if i == pick else distractors).append((0, subj))
            selectors.append(self._make_selector(rng, 0, references[0], subjects[pick]))
            (extra,) = add_reference(fresh_specs(1))
            targets.append((1, extra))
            selectors.append(Selector(1, extra.shape_id, "color", extra.color_id))

        target_scene = Scene(
            grid_size=grid_size,
            subjects=sorted((s for _, s in targets), key=lambda s: s.anchor),
        )
        instruction = self._build_instruction(selectors, n_refs=len(references))
        return Sample(
            references=references,
            instruction=instruction,
            target=target_scene,
            task=task,
            target_subjects=targets,
            distractor_subjects=distractors,
            selectors=selectors,
            sample_id=seed,
        )

    def _make_selector(self, rng: np.random.Generator, ref_index: int, scene: Scene, subject: Subject) -> Selector:
        """Pick a cue that uniquely identifies ``subject`` within ``scene``."""
        cues = []
        same_shape = [s for s in scene.subjects if s.shape_id == subject.shape_id]
        if sum(s.color_id == subject.color_id for s in same_shape) == 1:
            cues.append("color")
        for name, dim, pick in (("left", 1, min), ("right", 1, max), ("top", 0, min), ("bottom", 0, max)):
            extreme = pick(s.anchor[dim] for s in same_shape)
            holders = [s for s in same_shape if s.anchor[dim] == extreme]
            if holders == [subject]:
                cues.append(name)
        if not cues:
            raise GenerationError("no unique cue for subject")
        cue = cues[int(rng.integers(len(cues)))]
        return Selector(ref_index, subject.shape_id, cue, subject.color_id)

    def _build_instruction(self, selectors: list[Selector], n_refs: int) -> list[int]:
        tokens = [self.bos]
        for i, sel in enumerate(selectors):
            if i:
                tokens.append(self.sep)
            if n_refs > 1:
                tokens.append(self.image_token(sel.ref_index))
            if sel.cue == "color":
                tokens.append(self.color_token(sel.color_id))
            else:
                tokens.append(self.position_token(sel.cue))
            tokens.append(self.shape_token(sel.shape_id))
        tokens.append(self.eos)
        return tokens

    def gen_suite(self, tasks: list[str], per_task: int, seed: int, grid_size=None) -> list[Sample]:
        """A balanced suite: exactly ``per_task`` samples of each task."""
        samples = []
        for task in tasks:
            for i in range(per_task):
                samples.append(self.gen_sample(task, seed=seed * 1_000_003 + i, grid_size=grid_size))
        for i, s in enumerate(samples):
            s.sample_id = i
        return samples


# -- serialization -----------------------------------------------------------


def subject_to_json(s: Subject) -> dict:
    return {
        "shape_id": s.shape_id,
        "color_id": s.color_id,
        "anchor": list(s.anchor),
        "footprint": sorted(list(c) for c in s.footprint),
    }


def subject_from_json(d: dict) -> Subject:
    return Subject(
        shape_id=d["shape_id"],
        color_id=d["color_id"],
        anchor=tuple(d["anchor"]),
        footprint=frozenset(tuple(c) for c in d["footprint"]),
    )


def scene_to_json(scene: Scene) -> dict:
    return {
        "grid_size": list(scene.grid_size),
        "background": scene.background,
        "subjects": [subject_to_json(s) for s in scene.subjects],
    }


def scene_from_json(d: dict) -> Scene:
    return Scene(
        grid_size=tuple(d["grid_size"]),
        background=d["background"],
        subjects=[subject_from_json(s) for s in d["subjects"]],
    )


def sample_to_json(sample: Sample) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "sample_id": sample.sample_id,
        "task": sample.task,
        "references": [scene_to_json(s) for s in sample.references],
        "instruction": list(sample.instruction),
        "target": scene_to_json(sample.target),
        "target_subjects": [[k, subject_to_json(s)] for k, s in sample.target_subjects],
        "distractor_subjects": [[k, subject_to_json(s)] for k, s in sample.distractor_subjects],
        "selectors": [
            {"ref_index": sel.ref_index, "shape_id": sel.shape_id, "cue": sel.cue, "color_id": sel.color_id}
            for sel in sample.selectors
        ],
    }


def sample_from_json(d: dict) -> Sample:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise WorldError(f"unsupported schema_version {d.get('schema_version')!r}")
    return Sample(
        references=[scene_from_json(s) for s in d["references"]],
        instruction=list(d["instruction"]),
        target=scene_from_json(d["target"]),
        task=d["task"],
        target_subjects=[(k, subject_from_json(s)) for k, s in d["target_subjects"]],
        distractor_subjects=[(k, subject_from_json(s)) for k, s in d["distractor_subjects"]],
        selectors=[Selector(x["ref_index"], x["shape_id"], x["cue"], x["color_id"]) for x in d["selectors"]],
        sample_id=d.get("sample_id", 0),
    )


def save_suite(samples: list[Sample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s), sort_keys=True) + "\n")


def load_suite(path) -> list[Sample]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(sample_from_json(json.loads(line)))
    return out
