"""Synthetic paired samples with known patch/token correspondence.

Each scene places concepts on patches; a patch feature is its concept
latent plus an attribute offset plus Gaussian noise. Concept latents and
attribute offsets are rows of one orthonormal frame, so (i) distinct
concepts are exactly orthogonal, and (ii) an attribute offset never
leaks concept information: two patches sharing a concept are exact
cosine ties at the concept level and can only be told apart through
attribute/relational structure. Captions are id sequences naming
(concept, attribute) pairs of chosen patches, with synonym groups per
pair; ground truth maps each token to its patch.

Augmentation produces two asymmetric views: feature-space image ops
(jitter, patch dropout, channel masking) and token ops (synonym
replacement, insertion, adjacent swap, deletion), with ground truth
remapped so it always indexes valid patches; deleted or inserted tokens
carry no alignment.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace

import numpy as np

from .numerics import Matrix, PreconditionError, child_rng

MASK_ID = 0
N_ATTRIBUTES = 4
N_SYNONYMS = 2
ATTRIBUTE_NORM = 0.5
NO_ALIGNMENT = -1


@dataclass(frozen=True)
class SyntheticSpec:
    n_concepts: int = 12
    n_patches: int = 8
    n_tokens: int = 6
    feature_dim: int = 16
    noise_sigma: float = 0.05
    duplicate_entity_rate: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_tokens > 2 * self.n_patches:
            raise PreconditionError("n_tokens must be <= 2 * n_patches")
        if self.noise_sigma < 0:
            raise PreconditionError("noise_sigma must be >= 0")
        if not 0.0 <= self.duplicate_entity_rate <= 1.0:
            raise PreconditionError("duplicate_entity_rate must be in [0, 1]")
        if self.n_concepts < self.n_patches:
            raise PreconditionError("need n_concepts >= n_patches for distinct scenes")
        if self.feature_dim < self.n_concepts + N_ATTRIBUTES:
            raise PreconditionError(
                "feature_dim must be >= n_concepts + number of attributes "
                "for the orthogonal construction"
            )

    @property
    def vocab_size(self) -> int:
        return 1 + self.n_concepts * N_ATTRIBUTES * N_SYNONYMS


def token_id_for(concept: int, attribute: int, synonym: int) -> int:
    return 1 + (concept * N_ATTRIBUTES + attribute) * N_SYNONYMS + synonym


def decode_token_id(token_id: int) -> tuple[int, int, int]:
    """(concept, attribute, synonym) for a non-mask id."""
    base = token_id - 1
    synonym = base % N_SYNONYMS
    attribute = (base // N_SYNONYMS) % N_ATTRIBUTES
    concept = base // (N_SYNONYMS * N_ATTRIBUTES)
    return concept, attribute, synonym


@dataclass
class PairedSample:
    patch_features: Matrix  # n x feature_dim
    patch_indices: np.ndarray  # original patch slots (positional identity)
    token_ids: np.ndarray
    gt_alignment: np.ndarray  # per token: patch row index, or NO_ALIGNMENT
    attributes: Matrix  # per-patch applied offset vectors
    patch_concepts: np.ndarray
    patch_attributes: np.ndarray
    token_concept_features: Matrix  # concept latents only (for NN baselines)

    def n_patches(self) -> int:
        return self.patch_features.shape[0]


@dataclass(frozen=True)
class ImageAugment:
    jitter_sigma: float = 0.05
    jitter_p: float = 1.0
    patch_dropout_p: float = 0.1
    channel_mask_p: float = 0.0


@dataclass(frozen=True)
class TokenAugment:
    replacement_p: float = 0.1
    insertion_p: float = 0.1
    swap_p: float = 0.1
    deletion_p: float = 0.1


@dataclass(frozen=True)
class AugmentPolicy:
    image: ImageAugment = ImageAugment()
    tokens: TokenAugment = TokenAugment()

    def __post_init__(self):
        for p in (
            self.image.jitter_p, self.image.patch_dropout_p, self.image.channel_mask_p,
            self.tokens.replacement_p, self.tokens.insertion_p,
            self.tokens.swap_p, self.tokens.deletion_p,
        ):
            if not 0.0 <= p <= 1.0:
                raise PreconditionError("augmentation probabilities must be in [0, 1]")


def default_policies() -> tuple[AugmentPolicy, AugmentPolicy]:
    """Two asymmetric views; the second view distorts captions harder."""
    view1 = AugmentPolicy(
        ImageAugment(jitter_sigma=0.05, jitter_p=1.0, patch_dropout_p=0.1,
                     channel_mask_p=0.0),
        TokenAugment(replacement_p=0.1, insertion_p=0.1, swap_p=0.1, deletion_p=0.1),
    )
    view2 = AugmentPolicy(
        ImageAugment(jitter_sigma=0.05, jitter_p=0.1, patch_dropout_p=0.1,
                     channel_mask_p=0.2),
        TokenAugment(replacement_p=0.1, insertion_p=0.2, swap_p=0.1, deletion_p=0.2),
    )
    return view1, view2


class SyntheticDataset:
    """Latent frame plus deterministic per-index sample generation."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        rng = child_rng(spec.seed, "frame")
        q, _ = np.linalg.qr(rng.standard_normal((spec.feature_dim, spec.feature_dim)))
        self.concept_latents = np.ascontiguousarray(q[: spec.n_concepts])
        self.attribute_offsets = ATTRIBUTE_NORM * np.ascontiguousarray(
            q[spec.n_concepts: spec.n_concepts + N_ATTRIBUTES]
        )

    def sample(self, index: int) -> PairedSample:
        spec = self.spec
        rng = child_rng(spec.seed, "sample", index)
        duplicated = rng.random() < spec.duplicate_entity_rate

        if duplicated:
            chosen = rng.choice(spec.n_concepts, size=spec.n_patches - 1, replace=False)
            dup_concept = chosen[0]
            concepts = np.concatenate([[dup_concept], chosen])
            attributes = np.empty(spec.n_patches, dtype=np.intp)
            a1, a2 = rng.choice(N_ATTRIBUTES, size=2, replace=False)
            attributes[0], attributes[1] = a1, a2
            attributes[2:] = rng.integers(0, N_ATTRIBUTES, size=spec.n_patches - 2)
        else:
            concepts = rng.choice(spec.n_concepts, size=spec.n_patches, replace=False)
            attributes = rng.integers(0, N_ATTRIBUTES, size=spec.n_patches)
        order = rng.permutation(spec.n_patches)
        concepts, attributes = concepts[order], attributes[order]

        offsets = self.attribute_offsets[attributes]
        features = self.concept_latents[concepts] + offsets
        if spec.noise_sigma > 0:
            features = features + spec.noise_sigma * rng.standard_normal(features.shape)

        if spec.n_tokens <= spec.n_patches:
            described = rng.choice(spec.n_patches, size=spec.n_tokens, replace=False)
        else:
            extra = rng.integers(0, spec.n_patches, size=spec.n_tokens - spec.n_patches)
            described = np.concatenate([rng.permutation(spec.n_patches), extra])
            rng.shuffle(described)
        synonyms = rng.integers(0, N_SYNONYMS, size=spec.n_tokens)
        token_ids = np.array(
            [
                token_id_for(concepts[p], attributes[p], s)
                for p, s in zip(described, synonyms)
            ],
            dtype=np.intp,
        )
        return PairedSample(
            patch_features=features,
            patch_indices=np.arange(spec.n_patches),
            token_ids=token_ids,
            gt_alignment=described.astype(np.intp),
            attributes=offsets,
            patch_concepts=concepts.astype(np.intp),
            patch_attributes=attributes.astype(np.intp),
            token_concept_features=self.concept_latents[
                [decode_token_id(t)[0] for t in token_ids]
            ],
        )

    def concept_features_for(self, token_ids: np.ndarray) -> Matrix:
        return self.concept_latents[[decode_token_id(int(t))[0] for t in token_ids]]

    # -- augmentation ------------------------------------------------------

    def augment(
        self, sample: PairedSample, policy: AugmentPolicy, view: int, seed: int
    ) -> PairedSample:
        if view not in (1, 2):
            raise PreconditionError("view must be 1 or 2")
        rng = child_rng(seed, "augment", view)
        features = sample.patch_features.copy()
        img = policy.image

        if img.jitter_sigma > 0 and rng.random() < img.jitter_p:
            features = features + img.jitter_sigma * rng.standard_normal(features.shape)

        keep = rng.random(features.shape[0]) >= img.patch_dropout_p
        if not keep.any():
            keep[0] = True  # floor: at least one patch survives
        kept_rows = np.where(keep)[0]
        features = features[kept_rows]
        new_row_of = {int(old): new for new, old in enumerate(kept_rows)}

        if img.channel_mask_p > 0:
            pre_mask = features
            masked = rng.random(features.shape[1]) < img.channel_mask_p
            if masked.all():
                masked[0] = False  # floor: keep one channel
            features = pre_mask * (~masked)[None, :]
            # A fully zeroed row would be degenerate downstream; unmask
            # channels until every row keeps some energy.
            while (np.linalg.norm(features, axis=1) == 0.0).any() and masked.any():
                masked[np.where(masked)[0][0]] = False
                features = pre_mask * (~masked)[None, :]

        token_ids = list(int(t) for t in sample.token_ids)
        gt = [
            new_row_of.get(int(g), NO_ALIGNMENT) if g != NO_ALIGNMENT else NO_ALIGNMENT
            for g in sample.gt_alignment
        ]
        tok = policy.tokens

        for i, t in enumerate(token_ids):
            if t != MASK_ID and rng.random() < tok.replacement_p:
                concept, attribute, synonym = decode_token_id(t)
                if N_SYNONYMS > 1:
                    shift = int(rng.integers(1, N_SYNONYMS))
                    token_ids[i] = token_id_for(
                        concept, attribute, (synonym + shift) % N_SYNONYMS
                    )

        n_insert = int(rng.binomial(len(token_ids), tok.insertion_p))
        for _ in range(n_insert):
            pos = int(rng.integers(0, len(token_ids) + 1))
            token_ids.insert(pos, int(rng.integers(1, self.spec.vocab_size)))
            gt.insert(pos, NO_ALIGNMENT)

        for i in range(len(token_ids) - 1):
            if rng.random() < tok.swap_p:
                token_ids[i], token_ids[i + 1] = token_ids[i + 1], token_ids[i]
                gt[i], gt[i + 1] = gt[i + 1], gt[i]

        delete = rng.random(len(token_ids)) < tok.deletion_p
        if delete.all():
            delete[0] = False  # floor: at least one token retained
        token_ids = [t for t, d in zip(token_ids, delete) if not d]
        gt = [g for g, d in zip(gt, delete) if not d]

        token_ids = np.asarray(token_ids, dtype=np.intp)
        gt = np.asarray(gt, dtype=np.intp)
        return PairedSample(
            patch_features=features,
            patch_indices=sample.patch_indices[kept_rows],
            token_ids=token_ids,
            gt_alignment=gt,
            attributes=sample.attributes[kept_rows],
            patch_concepts=sample.patch_concepts[kept_rows],
            patch_attributes=sample.patch_attributes[kept_rows],
            token_concept_features=self.concept_features_for(token_ids),
        )


@functools.lru_cache(maxsize=8)
def _dataset_cache(spec: SyntheticSpec) -> SyntheticDataset:
    return SyntheticDataset(spec)


def dataset_for(spec: SyntheticSpec) -> SyntheticDataset:
    return _dataset_cache(spec)


def generate(spec: SyntheticSpec, batch_size: int, start_index: int = 0) -> list[PairedSample]:
    ds = dataset_for(spec)
    return [ds.sample(start_index + i) for i in range(batch_size)]


def augment_pair(
    spec: SyntheticSpec, sample: PairedSample, policy: AugmentPolicy, view: int, seed: int
) -> PairedSample:
    return dataset_for(spec).augment(sample, policy, view, seed)


# ---------------------------------------------------------------------------
# Line-oriented export for cross-implementation comparison.
# ---------------------------------------------------------------------------


def export_dataset(samples: list[PairedSample], path) -> None:
    """One record per sample:

        sample <index>
        patches <n> <d>      followed by n lines of d floats
        tokens <m>           followed by one line of m ids
        gt <m>               followed by one line of m ints (-1 = none)
        attributes <n> <d>   followed by n lines of d floats
        end
    """
    lines = []
    for i, s in enumerate(samples):
        n, d = s.patch_features.shape
        lines.append(f"sample {i}")
        lines.append(f"patches {n} {d}")
        lines += [" ".join(repr(float(v)) for v in row) for row in s.patch_features]
        lines.append(f"tokens {len(s.token_ids)}")
        lines.append(" ".join(str(int(t)) for t in s.token_ids))
        lines.append(f"gt {len(s.gt_alignment)}")
        lines.append(" ".join(str(int(g)) for g in s.gt_alignment))
        lines.append(f"attributes {n} {d}")
        lines += [" ".join(repr(float(v)) for v in row) for row in s.attributes]
        lines.append("end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_exported(path) -> list[dict]:
    """Parse records written by export_dataset (shape-checked)."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    records = []
    i = 0
    while i < len(lines):
        if not lines[i].startswith("sample "):
            raise ValueError(f"line {i + 1}: expected 'sample', got {lines[i]!r}")
        rec = {}
        i += 1
        _, n, d = lines[i].split()
        n, d = int(n), int(d)
        rec["patches"] = np.array(
            [[float(v) for v in lines[i + 1 + r].split()] for r in range(n)]
        ).reshape(n, d)
        i += 1 + n
        m = int(lines[i].split()[1])
        rec["tokens"] = np.array([int(v) for v in lines[i + 1].split()], dtype=np.intp)
        i += 2
        assert int(lines[i].split()[1]) == m
        rec["gt"] = np.array([int(v) for v in lines[i + 1].split()], dtype=np.intp)
        i += 2
        _, an, ad = lines[i].split()
        an, ad = int(an), int(ad)
        rec["attributes"] = np.array(
            [[float(v) for v in lines[i + 1 + r].split()] for r in range(an)]
        ).reshape(an, ad)
        i += 1 + an
        if lines[i] != "end":
            raise ValueError(f"line {i + 1}: expected 'end'")
        i += 1
        records.append(rec)
    return records
