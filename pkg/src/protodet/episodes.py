"""Episode construction: instance-wise K-shot sampling, masked support
entries, the synthetic feature-level task generator, and VOC-style
annotation ingestion."""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .detection import RoIFeature, apply_deltas, encode_deltas
from .graph import VOC_CATEGORIES, CategorySet, category_token

__all__ = [
    "PHASE_BASE",
    "PHASE_FINE_TUNE",
    "AnnotatedImage",
    "AnnotationError",
    "Episode",
    "Instance",
    "KShotError",
    "QueryImage",
    "SelectedImage",
    "SupportEntry",
    "SyntheticTaskSpec",
    "canonical_category",
    "dump_episode",
    "load_episode",
    "make_task",
    "mask_for",
    "parse_voc_annotation",
    "sample_kshot",
    "synth_generate",
]

PHASE_BASE = "base"
PHASE_FINE_TUNE = "fine-tune"

Box = tuple[float, float, float, float]


class AnnotationError(ValueError):
    """An annotation document is missing or mangling a required element."""


class KShotError(ValueError):
    """The image pool cannot satisfy the per-category instance quota."""


@dataclass(frozen=True)
class Instance:
    category: str
    box: Box


@dataclass
class AnnotatedImage:
    """One image's annotations: id, size, and its object instances."""

    image_id: str
    width: int
    height: int
    instances: list[Instance]
    source: str = "synthetic"

    def __post_init__(self):
        for inst in self.instances:
            xmin, ymin, xmax, ymax = inst.box
            if not (xmin < xmax and ymin < ymax):
                raise ValueError(f"box not well-ordered: {inst.box}")
            if xmin < 0 or ymin < 0 or xmax > self.width or ymax > self.height:
                raise ValueError(f"box {inst.box} outside image {self.width}x{self.height}")


@dataclass
class SupportEntry:
    """A support feature map with the binary mask locating its category."""

    category: int
    features: np.ndarray  # (grid_h, grid_w, feature_dim)
    mask: np.ndarray      # (grid_h, grid_w) of {0, 1}

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.mask = np.asarray(self.mask)
        if self.features.ndim != 3 or self.mask.shape != self.features.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} does not align with features {self.features.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        if not self.mask.any():
            raise ValueError("support mask has no positive cell")

    def pooled(self) -> np.ndarray:
        """Masked spatial average: the entry's contribution to its prototype."""
        return self.features[self.mask == 1].mean(axis=0)


@dataclass
class QueryImage:
    """Detector input for one image: its RoIs plus evaluable ground truth."""

    image_id: str
    rois: list[RoIFeature]
    truths: list[tuple[int, Box]]


@dataclass
class Episode:
    """One few-shot task: support entries covering every phase category,
    plus query images to detect on."""

    phase: str
    categories: CategorySet
    support: list[SupportEntry]
    queries: list[QueryImage]
    k: int

    def support_vectors(self):
        for entry in self.support:
            yield entry.category, entry.pooled()


def mask_for(box: Sequence[float], image_size: tuple[int, int],
             grid_size: tuple[int, int]) -> np.ndarray:
    """Binary grid mask: a cell is set iff its rectangle overlaps the box.

    The cell containing the box center is always set, so even a degenerate
    box yields a nonempty mask.
    """
    width, height = image_size
    grid_h, grid_w = grid_size
    xmin, ymin, xmax, ymax = (float(v) for v in box)
    mask = np.zeros((grid_h, grid_w), dtype=np.uint8)
    cell_w, cell_h = width / grid_w, height / grid_h
    for r in range(grid_h):
        for c in range(grid_w):
            if (c * cell_w < xmax and xmin < (c + 1) * cell_w
                    and r * cell_h < ymax and ymin < (r + 1) * cell_h):
                mask[r, c] = 1
    center_c = min(grid_w - 1, max(0, int((xmin + xmax) / 2 / cell_w)))
    center_r = min(grid_h - 1, max(0, int((ymin + ymax) / 2 / cell_h)))
    mask[center_r, center_c] = 1
    return mask


@dataclass(frozen=True)
class SelectedImage:
    """One image drawn by the K-shot sampler and, per category, which of its
    instances count toward the quota (the rest are masked out)."""

    image: AnnotatedImage
    kept: dict[str, tuple[int, ...]]


def sample_kshot(pool: Sequence[AnnotatedImage], categories: Sequence[str],
                 k: int, seed: "int | np.random.Generator") -> list[SelectedImage]:
    """Instance-wise K-shot selection at image granularity.

    For each category, shuffled candidate images are drawn until exactly K
    of its instances are claimed; when the last image overshoots the quota,
    the surplus instances are left out of the kept set rather than
    re-rolling the draw. Deterministic for a given seed.
    """
    rng = np.random.default_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    counts = {c: 0 for c in categories}
    for image in pool:
        for inst in image.instances:
            if inst.category in counts:
                counts[inst.category] += 1
    short = {c: n for c, n in counts.items() if n < k}
    if short:
        raise KShotError(f"pool cannot supply {k} instances per category; available: {short}")

    selected: dict[int, SelectedImage] = {}
    order: list[int] = []
    for category in categories:
        candidates = [i for i, img in enumerate(pool)
                      if any(inst.category == category for inst in img.instances)]
        rng.shuffle(candidates)
        needed = k
        for img_idx in candidates:
            if needed == 0:
                break
            image = pool[img_idx]
            instance_ids = [j for j, inst in enumerate(image.instances)
                            if inst.category == category]
            take = instance_ids[:needed]
            needed -= len(take)
            if img_idx not in selected:
                selected[img_idx] = SelectedImage(image, {})
                order.append(img_idx)
            selected[img_idx].kept[category] = tuple(take)
    return [selected[i] for i in order]


@dataclass
class SyntheticTaskSpec:
    """Everything that pins down one synthetic feature-level task.

    Novel generative prototypes are similarity-weighted combinations of the
    base ones (weights from the semantic adjacency), so the category graph
    carries real information about the feature space by construction.
    """

    categories: CategorySet
    feature_dim: int
    prototypes: np.ndarray            # (C, feature_dim) generative vectors
    sigma_noise: float
    sigma_background: float
    seed: int
    mixing_weights: "np.ndarray | None" = None   # (n_novel, n_base)
    image_size: tuple[int, int] = (128, 128)
    grid_size: tuple[int, int] = (4, 4)
    rois_per_image: int = 20
    max_instances: int = 3
    fg_proposals_per_instance: int = 2
    proposal_jitter: float = 0.12
    novel_distractor_rate: float = 0.25

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.shape != (len(self.categories), self.feature_dim):
            raise ValueError(
                f"prototype matrix shape {self.prototypes.shape} != "
                f"({len(self.categories)}, {self.feature_dim})")
        base = self.categories.base_indices
        for a in range(len(base)):
            for b in range(a + 1, len(base)):
                if np.array_equal(self.prototypes[base[a]], self.prototypes[base[b]]):
                    raise ValueError("base generative prototypes must be mutually distinct")


def make_task(cats: CategorySet, similarity: np.ndarray, feature_dim: int,
              sigma_noise: float, seed: int,
              sigma_background: "float | None" = None,
              **knobs) -> SyntheticTaskSpec:
    """Build a synthetic task whose novel categories mix the base ones.

    ``similarity`` is the semantic adjacency over ``cats`` (novel rows are
    read against base columns to form the mixing weights). Base prototypes
    are seeded unit vectors; a one-hot similarity row reproduces the
    corresponding base prototype exactly.
    """
    n = len(cats)
    if similarity.shape != (n, n):
        raise ValueError(f"similarity shape {similarity.shape} != ({n}, {n})")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    prototypes = np.zeros((n, feature_dim))
    for i in cats.base_indices:
        v = rng.normal(size=feature_dim)
        prototypes[i] = v / np.linalg.norm(v)
    base_idx = list(cats.base_indices)
    novel_idx = list(cats.novel_indices)
    mixing = None
    if novel_idx:
        mixing = np.zeros((len(novel_idx), len(base_idx)))
        for r, i in enumerate(novel_idx):
            weights = np.maximum(0.0, similarity[i, base_idx])
            if weights.sum() == 0.0:
                weights = np.ones(len(base_idx))
            weights = weights / weights.sum()
            mixing[r] = weights
            mixed = weights @ prototypes[base_idx]
            # Rescale spread mixtures back to unit length: otherwise the most
            # correlated base prototype would always dominate the novel one's
            # own match signal. A one-hot mixture is already unit and stays
            # bit-identical to its base prototype.
            norm = float(np.linalg.norm(mixed))
            prototypes[i] = mixed if abs(norm - 1.0) <= 1e-9 else mixed / norm
    if sigma_background is None:
        sigma_background = float(np.sqrt(1.0 / feature_dim + sigma_noise ** 2))
    return SyntheticTaskSpec(cats, feature_dim, prototypes, sigma_noise,
                             sigma_background, seed, mixing, **knobs)


def _random_box(spec: SyntheticTaskSpec, rng: np.random.Generator) -> Box:
    width, height = spec.image_size
    w = rng.uniform(0.25, 0.55) * width
    h = rng.uniform(0.25, 0.55) * height
    cx = rng.uniform(w / 2, width - w / 2)
    cy = rng.uniform(h / 2, height - h / 2)
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _random_image(spec: SyntheticTaskSpec, image_id: str, allowed: Sequence[str],
                  distractors: Sequence[str], rng: np.random.Generator,
                  force_category: "str | None" = None) -> AnnotatedImage:
    n_inst = int(rng.integers(1, spec.max_instances + 1))
    instances = []
    for j in range(n_inst):
        if j == 0 and force_category is not None:
            category = force_category
        elif distractors and rng.uniform() < spec.novel_distractor_rate:
            category = distractors[int(rng.integers(len(distractors)))]
        else:
            category = allowed[int(rng.integers(len(allowed)))]
        instances.append(Instance(category, _random_box(spec, rng)))
    return AnnotatedImage(image_id, *spec.image_size, instances)


def _generate_pool(spec: SyntheticTaskSpec, categories: Sequence[str],
                   distractors: Sequence[str], k: int, n_extra: int,
                   rng: np.random.Generator, tag: str) -> list[AnnotatedImage]:
    """Images until every category holds at least k instances, plus extras."""
    pool: list[AnnotatedImage] = []
    counts = {c: 0 for c in categories}
    serial = 0

    def admit(image: AnnotatedImage):
        pool.append(image)
        for inst in image.instances:
            if inst.category in counts:
                counts[inst.category] += 1

    for _ in range(max(n_extra, 2 * k)):
        admit(_random_image(spec, f"{tag}-{serial}", categories, distractors, rng))
        serial += 1
    for category in categories:
        while counts[category] < k:
            admit(_random_image(spec, f"{tag}-{serial}", categories, distractors, rng,
                                force_category=category))
            serial += 1
    return pool


def _render_support(spec: SyntheticTaskSpec, image: AnnotatedImage, category: str,
                    kept: tuple[int, ...], phase_cats: CategorySet,
                    rng: np.random.Generator) -> SupportEntry:
    """Feature grid for one (image, category) support entry.

    Every instance is painted onto the grid (the entry's own category last,
    so its masked cells keep its features); the mask covers only the kept
    instances, which is how overshoot instances get masked out.
    """
    grid_h, grid_w = spec.grid_size
    f_dim = spec.feature_dim
    features = spec.sigma_background * rng.normal(size=(grid_h, grid_w, f_dim))
    own = [(j, inst) for j, inst in enumerate(image.instances) if inst.category == category]
    rest = [(j, inst) for j, inst in enumerate(image.instances) if inst.category != category]
    for _, inst in rest + own:
        cells = mask_for(inst.box, spec.image_size, spec.grid_size) == 1
        proto = spec.prototypes[spec.categories.index(inst.category)]
        noise = spec.sigma_noise * rng.normal(size=(int(cells.sum()), f_dim))
        features[cells] = proto + noise
    mask = np.zeros((grid_h, grid_w), dtype=np.uint8)
    for j in kept:
        mask |= mask_for(image.instances[j].box, spec.image_size, spec.grid_size)
    return SupportEntry(phase_cats.index(category), features, mask)


def _jittered_proposal(spec: SyntheticTaskSpec, box: Box,
                       rng: np.random.Generator) -> Box:
    deltas = rng.normal(scale=spec.proposal_jitter, size=4)
    xmin, ymin, xmax, ymax = apply_deltas(box, deltas)
    width, height = spec.image_size
    xmin, xmax = max(0.0, xmin), min(float(width), xmax)
    ymin, ymax = max(0.0, ymin), min(float(height), ymax)
    if xmax - xmin < 1.0:
        xmin, xmax = max(0.0, xmin - 1.0), min(float(width), xmax + 1.0)
    if ymax - ymin < 1.0:
        ymin, ymax = max(0.0, ymin - 1.0), min(float(height), ymax + 1.0)
    return (xmin, ymin, xmax, ymax)


def _render_query(spec: SyntheticTaskSpec, image: AnnotatedImage,
                  phase_cats: CategorySet, rng: np.random.Generator) -> QueryImage:
    """RoIs for one image: jittered proposals on each instance plus random
    background boxes with background-distributed features.

    Instances of categories outside the phase set (novel ones during base
    training) yield background-labeled RoIs and no ground truth.
    """
    width, height = spec.image_size
    phase_names = set(phase_cats.names)
    rois: list[RoIFeature] = []
    truths: list[tuple[int, Box]] = []
    for inst in image.instances:
        labeled = inst.category in phase_names
        proto = spec.prototypes[spec.categories.index(inst.category)]
        if labeled:
            truths.append((phase_cats.index(inst.category), inst.box))
        for _ in range(spec.fg_proposals_per_instance):
            proposal = _jittered_proposal(spec, inst.box, rng)
            feature = proto + spec.sigma_noise * rng.normal(size=spec.feature_dim)
            if labeled:
                rois.append(RoIFeature(feature, proposal,
                                       gt_category=phase_cats.index(inst.category),
                                       gt_deltas=encode_deltas(proposal, inst.box)))
            else:
                rois.append(RoIFeature(feature, proposal))
    while len(rois) < spec.rois_per_image:
        feature = spec.sigma_background * rng.normal(size=spec.feature_dim)
        rois.append(RoIFeature(feature, _random_box(spec, rng)))
    return QueryImage(image.image_id, rois, truths)


def synth_generate(spec: SyntheticTaskSpec, phase: str, k: int,
                   n_query: int, seed: int,
                   heldout_queries: bool = False) -> Episode:
    """One synthetic episode, bitwise reproducible from (spec, phase, seed).

    Base phase: K-shot support over the base categories, fresh query images
    (novel instances appear only as background). Fine-tuning: support and
    queries share the same K-shot image selection, unless
    ``heldout_queries`` asks for fresh evaluation images.
    """
    if phase not in (PHASE_BASE, PHASE_FINE_TUNE):
        raise ValueError(f"unknown phase '{phase}'")
    phase_cats = spec.categories.base_only() if phase == PHASE_BASE else spec.categories
    distractors = spec.categories.novel_names if phase == PHASE_BASE else ()
    rng_struct = np.random.default_rng(np.random.SeedSequence([spec.seed, seed, 0]))
    rng_noise = np.random.default_rng(np.random.SeedSequence([spec.seed, seed, 1]))

    pool = _generate_pool(spec, phase_cats.names, distractors, k,
                          n_extra=n_query, rng=rng_struct, tag=f"{phase}-{seed}")
    selection = sample_kshot(pool, phase_cats.names, k, rng_struct)
    support = [
        _render_support(spec, sel.image, category, kept, phase_cats, rng_noise)
        for sel in selection
        for category, kept in sel.kept.items()
    ]

    if phase == PHASE_FINE_TUNE and not heldout_queries:
        query_images = [sel.image for sel in selection]
    else:
        selected_ids = {id(sel.image) for sel in selection}
        fresh = [img for img in pool if id(img) not in selected_ids]
        if len(fresh) < n_query:
            fresh = pool
        picks = rng_struct.choice(len(fresh), size=min(n_query, len(fresh)), replace=False)
        query_images = [fresh[i] for i in sorted(picks)]
    queries = [_render_query(spec, img, phase_cats, rng_noise) for img in query_images]
    return Episode(phase, phase_cats, support, queries, k)


_TOKEN_TO_CANONICAL = None


def canonical_category(name: str) -> str:
    """Normalize any known category spelling to its canonical short name."""
    global _TOKEN_TO_CANONICAL
    if _TOKEN_TO_CANONICAL is None:
        _TOKEN_TO_CANONICAL = {category_token(n): n for n in VOC_CATEGORIES}
    token = category_token(name)
    return _TOKEN_TO_CANONICAL.get(token, token)


def _required(node: ET.Element, path: str) -> ET.Element:
    found = node.find(path)
    if found is None:
        raise AnnotationError(f"missing element '{path}'")
    return found


def _required_int(node: ET.Element, path: str, context: str) -> int:
    found = node.find(path)
    if found is None or found.text is None:
        raise AnnotationError(f"missing element '{context}/{path}'")
    try:
        return int(found.text.strip())
    except ValueError:
        raise AnnotationError(f"element '{context}/{path}' is not an integer: "
                              f"{found.text!r}") from None


def parse_voc_annotation(xml_text: str) -> AnnotatedImage:
    """Parse one VOC-style annotation document.

    Reads size/width, size/height and each object's name and bndbox; other
    elements (pose, truncated, difficult, ...) are ignored. Category names
    go through the alias table, so any known spelling normalizes to the
    canonical short name.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise AnnotationError(f"not well-formed XML: {exc}") from None
    size = _required(root, "size")
    width = _required_int(size, "width", "size")
    height = _required_int(size, "height", "size")
    filename = root.findtext("filename", default="").strip()

    instances = []
    for obj in root.findall("object"):
        name_el = obj.find("name")
        if name_el is None or name_el.text is None or not name_el.text.strip():
            raise AnnotationError("missing element 'object/name'")
        category = canonical_category(name_el.text.strip())
        bndbox = obj.find("bndbox")
        if bndbox is None:
            raise AnnotationError("missing element 'object/bndbox'")
        coords = [_required_int(bndbox, key, "bndbox")
                  for key in ("xmin", "ymin", "xmax", "ymax")]
        xmin, ymin, xmax, ymax = coords
        if xmin >= xmax or ymin >= ymax:
            raise ValueError(f"degenerate bndbox ({xmin}, {ymin}, {xmax}, {ymax})")
        instances.append(Instance(category, (float(xmin), float(ymin),
                                             float(xmax), float(ymax))))
    return AnnotatedImage(filename, width, height, instances, source="voc-xml")


def dump_episode(episode: Episode, provenance: "dict | None" = None) -> str:
    """Serialize an episode (with full float fidelity) for reproduction."""
    doc = {
        "provenance": provenance or {},
        "phase": episode.phase,
        "k": episode.k,
        "categories": {
            "names": list(episode.categories.names),
            "novel": sorted(episode.categories.novel),
            "split_id": episode.categories.split_id,
        },
        "support": [
            {"category": e.category, "features": e.features.tolist(), "mask": e.mask.tolist()}
            for e in episode.support
        ],
        "queries": [
            {
                "image_id": q.image_id,
                "truths": [[cat, list(box)] for cat, box in q.truths],
                "rois": [
                    {
                        "vector": r.vector.tolist(),
                        "box": list(r.proposal_box),
                        "gt_category": r.gt_category,
                        "gt_deltas": None if r.gt_deltas is None else r.gt_deltas.tolist(),
                    }
                    for r in q.rois
                ],
            }
            for q in episode.queries
        ],
    }
    return json.dumps(doc, indent=1)


def load_episode(text: str) -> Episode:
    """Inverse of :func:`dump_episode`."""
    doc = json.loads(text)
    cats = CategorySet(tuple(doc["categories"]["names"]),
                       frozenset(doc["categories"]["novel"]),
                       doc["categories"]["split_id"])
    support = [SupportEntry(e["category"], np.array(e["features"]),
                            np.array(e["mask"], dtype=np.uint8))
               for e in doc["support"]]
    queries = []
    for q in doc["queries"]:
        rois = [RoIFeature(np.array(r["vector"]), tuple(r["box"]),
                           gt_category=r["gt_category"],
                           gt_deltas=None if r["gt_deltas"] is None else np.array(r["gt_deltas"]))
                for r in q["rois"]]
        truths = [(cat, tuple(box)) for cat, box in q["truths"]]
        queries.append(QueryImage(q["image_id"], rois, truths))
    return Episode(doc["phase"], cats, support, queries, doc["k"])
