"""Interaction and feature data: loading, splitting, negatives, synthesis."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, final

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from magnetrec.errors import DataError, InputNotFoundError
from magnetrec.mgf import MatrixFormatError, read_matrix, write_matrix

if TYPE_CHECKING:
    from collections.abc import Sequence
    from pathlib import Path

    from numpy.typing import NDArray

logger = logging.getLogger(__name__)

MIN_SPLIT_EDGES = 3


class InteractionParseError(DataError):
    """Raised when an interaction file line is not ``user<TAB>item``."""

    def __init__(self, path: Path, line_number: int, line: str) -> None:
        self.path = path
        self.line_number = line_number
        self.line = line
        super().__init__(f"{path}:{line_number}: expected 'user<TAB>item', got {line!r}")


class EmptyDatasetError(DataError):
    """Raised when no interactions survive filtering."""


class UnsatisfiableNegativeError(DataError):
    """Raised when a user has interacted with every item."""

    def __init__(self, user: int) -> None:
        self.user = user
        super().__init__(f"User {user} has interacted with every item; no negative exists")


class FeatureShapeError(DataError):
    """Raised when a feature matrix does not cover the item space."""


class FeatureDataError(DataError):
    """Raised when a feature matrix holds NaN or Inf."""

    def __init__(self, path: Path, row: int) -> None:
        self.path = path
        self.row = row
        super().__init__(f"Non-finite feature value in {path} at row {row}")


def natural_key(external_id: str) -> tuple[int, int, str]:
    """Sort key placing numeric ids in numeric order before other ids."""
    if external_id.isdigit():
        return (0, int(external_id), "")
    return (1, 0, external_id)


@dataclass(frozen=True)
class IdMap:
    """Bijection between external string ids and dense ids ``0..n-1``."""

    external: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index = {ext: dense for dense, ext in enumerate(self.external)}
        if len(index) != len(self.external):
            msg = "Id map has duplicate external ids"
            raise DataError(msg)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.external)

    def to_dense(self, external_id: str) -> int:
        return self._index[external_id]

    def to_external(self, dense_id: int) -> str:
        return self.external[dense_id]

    @classmethod
    def identity(cls, size: int) -> IdMap:
        return cls(tuple(str(i) for i in range(size)))


def write_id_map(path: Path, id_map: IdMap) -> None:
    """Write the two-column ``external_id<TAB>dense_id`` TSV."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{ext}\t{dense}\n" for dense, ext in enumerate(id_map.external)]
    path.write_text("".join(lines), encoding="utf-8")


def read_id_map(path: Path) -> IdMap:
    if not path.is_file():
        raise InputNotFoundError(path, "id map")
    rows: list[tuple[int, str]] = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1].strip().isdigit():
            raise InteractionParseError(path, number, line)
        rows.append((int(parts[1]), parts[0]))
    rows.sort()
    if [dense for dense, _ in rows] != list(range(len(rows))):
        msg = f"Id map {path} is not a bijection onto 0..{len(rows) - 1}"
        raise DataError(msg)
    return IdMap(tuple(ext for _, ext in rows))


@dataclass(frozen=True, eq=False)
class InteractionSet:
    """Deduplicated user-item edges with per-user sorted histories.

    ``edges`` is an ``(m, 2)`` int64 array sorted by (user, item).
    """

    num_users: int
    num_items: int
    edges: NDArray[np.int64]
    histories: tuple[NDArray[np.int64], ...]
    user_map: IdMap | None = None
    item_map: IdMap | None = None

    @classmethod
    def from_pairs(
        cls,
        num_users: int,
        num_items: int,
        pairs: NDArray[np.int64] | Sequence[tuple[int, int]],
        user_map: IdMap | None = None,
        item_map: IdMap | None = None,
    ) -> InteractionSet:
        """Build a validated set from dense (user, item) pairs.

        Raises:
            DataError: If any id is out of range.
        """
        edges = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if edges.size and (
            edges[:, 0].min() < 0
            or edges[:, 0].max() >= num_users
            or edges[:, 1].min() < 0
            or edges[:, 1].max() >= num_items
        ):
            msg = f"Edge ids out of range for {num_users} users x {num_items} items"
            raise DataError(msg)
        keys = np.unique(edges[:, 0] * num_items + edges[:, 1])
        edges = np.stack([keys // num_items, keys % num_items], axis=1).astype(np.int64)
        bounds = np.searchsorted(edges[:, 0], np.arange(num_users + 1))
        histories = tuple(
            edges[bounds[u] : bounds[u + 1], 1].copy() for u in range(num_users)
        )
        return cls(num_users, num_items, edges, histories, user_map, item_map)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def user_degrees(self) -> NDArray[np.int64]:
        return np.bincount(self.edges[:, 0], minlength=self.num_users).astype(np.int64)

    @property
    def item_degrees(self) -> NDArray[np.int64]:
        return np.bincount(self.edges[:, 1], minlength=self.num_items).astype(np.int64)

    def history(self, user: int) -> NDArray[np.int64]:
        return self.histories[user]

    def contains(self, users: NDArray[np.int64], items: NDArray[np.int64]) -> NDArray[np.bool_]:
        """Vectorized membership test for (user, item) pairs."""
        keys = self.edges[:, 0] * self.num_items + self.edges[:, 1]
        query = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(
            items, dtype=np.int64
        )
        if keys.size == 0:
            return np.zeros(query.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(keys, query), keys.size - 1)
        return np.asarray(keys[pos] == query)


def _parse_interaction_lines(path: Path) -> list[tuple[str, str]]:
    pairs: list[tuple[str, str]] = []
    with path.open(encoding="utf-8") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise InteractionParseError(path, number, line)
            pairs.append((parts[0].strip(), parts[1].strip()))
    return pairs


def load_interactions(path: Path, min_interactions: int = 4) -> InteractionSet:
    """Load a ``user<TAB>item`` file, filter sparse users, re-densify ids.

    Duplicate pairs are collapsed before counting. Dense ids follow the
    natural order of the surviving external ids; the maps are attached to
    the returned set.

    Raises:
        InputNotFoundError: If the file does not exist.
        InteractionParseError: On a malformed line.
        EmptyDatasetError: If no user reaches min_interactions.
    """
    if min_interactions < 1:
        msg = f"min_interactions must be >= 1, got {min_interactions}"
        raise DataError(msg)
    if not path.is_file():
        raise InputNotFoundError(path, "interaction file")

    unique_pairs = sorted(set(_parse_interaction_lines(path)))
    counts: dict[str, int] = {}
    for user, _ in unique_pairs:
        counts[user] = counts.get(user, 0) + 1
    kept = [(u, i) for u, i in unique_pairs if counts[u] >= min_interactions]
    if not kept:
        msg = f"No users with at least {min_interactions} interactions in {path}"
        raise EmptyDatasetError(msg)

    user_map = IdMap(tuple(sorted({u for u, _ in kept}, key=natural_key)))
    item_map = IdMap(tuple(sorted({i for _, i in kept}, key=natural_key)))
    dense = [(user_map.to_dense(u), item_map.to_dense(i)) for u, i in kept]
    data = InteractionSet.from_pairs(len(user_map), len(item_map), dense, user_map, item_map)
    logger.info(
        "Loaded %d users, %d items, %d edges from %s",
        data.num_users,
        data.num_items,
        data.num_edges,
        path,
    )
    return data


def write_interactions(
    path: Path,
    pairs: NDArray[np.int64],
    user_map: IdMap | None = None,
    item_map: IdMap | None = None,
) -> None:
    """Write pairs as ``user<TAB>item`` lines, mapping to external ids if maps are given."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    for u, i in np.asarray(pairs, dtype=np.int64).reshape(-1, 2).tolist():
        user = user_map.to_external(u) if user_map else str(u)
        item = item_map.to_external(i) if item_map else str(i)
        lines.append(f"{user}\t{item}\n")
    path.write_text("".join(lines), encoding="utf-8")


def read_dense_pairs(path: Path) -> NDArray[np.int64]:
    """Read a ``user<TAB>item`` file whose ids are already dense integers."""
    if not path.is_file():
        raise InputNotFoundError(path, "pair file")
    rows: list[tuple[int, int]] = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].isdigit() or not parts[1].isdigit():
            raise InteractionParseError(path, number, line)
        rows.append((int(parts[0]), int(parts[1])))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class SplitBundle:
    """Train interactions plus held-out validation and test pairs."""

    train: InteractionSet
    valid: NDArray[np.int64]
    test: NDArray[np.int64]
    seed: int

    def pairs(self, split: str) -> NDArray[np.int64]:
        if split == "valid":
            return self.valid
        if split == "test":
            return self.test
        if split == "train":
            return self.train.edges
        msg = f"Unknown split '{split}' (expected train, valid or test)"
        raise DataError(msg)


def held_out_by_user(pairs: NDArray[np.int64]) -> dict[int, NDArray[np.int64]]:
    """Group held-out pairs into sorted per-user item arrays."""
    grouped: dict[int, list[int]] = {}
    for u, i in np.asarray(pairs, dtype=np.int64).reshape(-1, 2).tolist():
        grouped.setdefault(u, []).append(i)
    return {u: np.unique(np.asarray(items, dtype=np.int64)) for u, items in sorted(grouped.items())}


def _held_out_size(n: int, ratio: float) -> int:
    if ratio <= 0:
        return 0
    return max(1, int(np.floor(n * ratio)))


def split_interactions(
    data: InteractionSet,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitBundle:
    """Per-user random train/valid/test partition.

    Each held-out partition with a positive ratio gets ``max(1, floor(n*r))``
    edges and the remainder goes to train, so rounding favors training.
    Users with fewer than three edges keep everything in train.
    """
    if not np.isclose(sum(ratios), 1.0):
        msg = f"Split ratios must sum to 1, got {ratios}"
        raise DataError(msg)
    _, r_valid, r_test = ratios
    rng = np.random.default_rng(seed)
    train: list[NDArray[np.int64]] = []
    valid: list[NDArray[np.int64]] = []
    test: list[NDArray[np.int64]] = []
    short_users = 0

    for u, history in enumerate(data.histories):
        n = history.size
        if n == 0:
            continue
        if n < MIN_SPLIT_EDGES:
            short_users += 1
            train.append(np.stack([np.full(n, u), history], axis=1))
            continue
        perm = rng.permutation(history)
        n_valid = _held_out_size(n, r_valid)
        n_test = _held_out_size(n, r_test)
        users = np.full(n, u, dtype=np.int64)
        valid.append(np.stack([users[:n_valid], perm[:n_valid]], axis=1))
        test.append(np.stack([users[:n_test], perm[n_valid : n_valid + n_test]], axis=1))
        rest = perm[n_valid + n_test :]
        train.append(np.stack([users[: rest.size], rest], axis=1))

    if short_users:
        logger.warning(
            "%d user(s) with fewer than %d edges kept entirely in train",
            short_users,
            MIN_SPLIT_EDGES,
        )

    def _concat(parts: list[NDArray[np.int64]]) -> NDArray[np.int64]:
        if not parts:
            return np.zeros((0, 2), dtype=np.int64)
        stacked = np.concatenate(parts).astype(np.int64)
        order = np.lexsort((stacked[:, 1], stacked[:, 0]))
        return stacked[order]

    train_set = InteractionSet.from_pairs(
        data.num_users, data.num_items, _concat(train), data.user_map, data.item_map
    )
    return SplitBundle(train=train_set, valid=_concat(valid), test=_concat(test), seed=seed)


def sample_negatives_batch(
    users: NDArray[np.int64],
    train: InteractionSet,
    count: int,
    rng: np.random.Generator,
) -> NDArray[np.int64]:
    """Draw ``count`` negatives per user, uniform over items outside I_u.

    Returns:
        ``(len(users), count)`` array of item ids.

    Raises:
        UnsatisfiableNegativeError: If some user has interacted with every item.
    """
    users = np.asarray(users, dtype=np.int64)
    degrees = train.user_degrees[users] if users.size else np.zeros(0, dtype=np.int64)
    full = np.flatnonzero(degrees >= train.num_items)
    if full.size:
        raise UnsatisfiableNegativeError(int(users[full[0]]))

    repeated = np.repeat(users, count).reshape(users.size, count)
    out = rng.integers(0, train.num_items, size=(users.size, count), dtype=np.int64)
    rejected = train.contains(repeated, out)
    while rejected.any():
        out[rejected] = rng.integers(0, train.num_items, size=int(rejected.sum()), dtype=np.int64)
        rejected[rejected] = train.contains(repeated[rejected], out[rejected])
    return out


def sample_negatives(
    user: int, train: InteractionSet, count: int, rng: np.random.Generator
) -> NDArray[np.int64]:
    """Draw ``count`` negatives for a single user."""
    return sample_negatives_batch(np.asarray([user], dtype=np.int64), train, count, rng)[0]


class Modality(str, Enum):
    """Item content modalities."""

    APPEARANCE = "A"  # Visual features
    SEMANTICS = "S"  # Textual features


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Row-major float32 item features for one modality."""

    modality: Modality
    values: NDArray[np.float32]
    zero_rows: tuple[int, ...] = ()

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def fingerprint(self) -> str:
        """SHA-256 of the little-endian f32 payload."""
        payload = np.ascontiguousarray(self.values, dtype="<f4").tobytes()
        return hashlib.sha256(payload).hexdigest()

    @classmethod
    def from_array(cls, modality: Modality, values: NDArray[np.floating]) -> FeatureMatrix:
        matrix = np.ascontiguousarray(values, dtype=np.float32)
        zero_rows = tuple(int(r) for r in np.flatnonzero(~matrix.any(axis=1)))
        return cls(modality, matrix, zero_rows)


def load_features(path: Path, modality: Modality, num_items: int) -> FeatureMatrix:
    """Load an MGF1 feature file and validate it against the item space.

    All-zero rows are accepted and recorded in ``zero_rows``.

    Raises:
        FeatureShapeError: If the row count differs from num_items.
        FeatureDataError: If any value is NaN or Inf.
        TruncatedFileError: If the payload is shorter than the header implies.
    """
    values = read_matrix(path)
    if values.dtype != np.float32:
        msg = f"Feature file {path} must hold f32 values, found {values.dtype}"
        raise MatrixFormatError(msg)
    if values.shape[0] != num_items:
        msg = (
            f"Feature file {path} has {values.shape[0]} rows "
            f"but the dataset has {num_items} items"
        )
        raise FeatureShapeError(msg)
    finite = np.isfinite(values).all(axis=1)
    if not finite.all():
        raise FeatureDataError(path, int(np.flatnonzero(~finite)[0]))
    features = FeatureMatrix.from_array(modality, values)
    if features.zero_rows:
        logger.warning("%s: %d all-zero feature row(s) flagged", path, len(features.zero_rows))
    return features


def load_catalog_features(path: Path, modality: Modality, item_map: IdMap) -> FeatureMatrix:
    """Load a feature file indexed by the raw item catalog.

    When every external item id is a non-negative integer, row ``r`` holds
    the features of external item ``r`` and the rows of surviving items are
    selected in dense order. Otherwise the file must already hold one row
    per surviving item in dense order.
    """
    if all(ext.isdigit() for ext in item_map.external):
        values = read_matrix(path)
        rows = np.asarray([int(ext) for ext in item_map.external], dtype=np.int64)
        if rows.size and int(rows.max()) >= values.shape[0]:
            msg = (
                f"Feature file {path} has {values.shape[0]} rows but item id "
                f"{int(rows.max())} needs row {int(rows.max())}"
            )
            raise FeatureShapeError(msg)
        if values.dtype != np.float32:
            msg = f"Feature file {path} must hold f32 values, found {values.dtype}"
            raise MatrixFormatError(msg)
        selected = values[rows]
        finite = np.isfinite(selected).all(axis=1)
        if not finite.all():
            raise FeatureDataError(path, int(rows[np.flatnonzero(~finite)[0]]))
        features = FeatureMatrix.from_array(modality, selected)
        if features.zero_rows:
            logger.warning("%s: %d all-zero feature row(s) flagged", path, len(features.zero_rows))
        return features
    return load_features(path, modality, len(item_map))


def write_features(path: Path, features: FeatureMatrix) -> None:
    write_matrix(path, features.values.astype(np.float32))


@final
class SyntheticSpec(BaseModel):
    """Planted block-structure dataset for desk-scale experiments."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    num_users: int = Field(default=200, ge=1)
    num_items: int = Field(default=120, ge=2)
    num_blocks: int = Field(default=4, ge=1)
    feature_dim_a: int = Field(default=32, ge=1)
    feature_dim_s: int = Field(default=16, ge=1)
    density: float = Field(default=0.1, gt=0.0, lt=1.0)
    noise: float = Field(default=0.1, ge=0.0, le=1.0)
    feature_noise: float = Field(default=0.5, ge=0.0)
    min_user_items: int = Field(default=4, ge=1)
    seed: int = 7

    @model_validator(mode="after")
    def validate_blocks(self) -> SyntheticSpec:
        if self.num_users % self.num_blocks or self.num_items % self.num_blocks:
            msg = (
                f"num_blocks={self.num_blocks} must divide num_users={self.num_users} "
                f"and num_items={self.num_items}"
            )
            raise ValueError(msg)
        if self.min_user_items > self.num_items:
            msg = "min_user_items cannot exceed num_items"
            raise ValueError(msg)
        return self

    def user_block(self, user: int) -> int:
        return user // (self.num_users // self.num_blocks)


def generate_synthetic(spec: SyntheticSpec) -> tuple[InteractionSet, FeatureMatrix, FeatureMatrix]:
    """Generate interactions and two feature modalities with planted blocks.

    Each edge stays inside the user's block with probability ``1 - noise``.
    Item features are the block centroid plus Gaussian noise of scale
    ``feature_noise``.
    """
    rng = np.random.default_rng(spec.seed)
    items_per_block = spec.num_items // spec.num_blocks
    all_items = np.arange(spec.num_items, dtype=np.int64)
    item_blocks = all_items // items_per_block

    pairs: list[NDArray[np.int64]] = []
    for u in range(spec.num_users):
        block = spec.user_block(u)
        inside = all_items[item_blocks == block]
        outside = all_items[item_blocks != block]
        n_u = max(spec.min_user_items, int(rng.binomial(spec.num_items, spec.density)))
        n_in = int(rng.binomial(n_u, 1.0 - spec.noise))
        n_in = min(n_in, inside.size)
        n_out = min(n_u - n_in, outside.size)
        chosen = np.concatenate(
            [
                rng.choice(inside, size=n_in, replace=False),
                rng.choice(outside, size=n_out, replace=False) if n_out else outside[:0],
            ]
        )
        pairs.append(np.stack([np.full(chosen.size, u, dtype=np.int64), chosen], axis=1))

    data = InteractionSet.from_pairs(
        spec.num_users,
        spec.num_items,
        np.concatenate(pairs),
        IdMap.identity(spec.num_users),
        IdMap.identity(spec.num_items),
    )

    def _modality(modality: Modality, dim: int) -> FeatureMatrix:
        centroids = rng.standard_normal((spec.num_blocks, dim))
        noise = rng.standard_normal((spec.num_items, dim)) * spec.feature_noise
        return FeatureMatrix.from_array(modality, centroids[item_blocks] + noise)

    features_a = _modality(Modality.APPEARANCE, spec.feature_dim_a)
    features_s = _modality(Modality.SEMANTICS, spec.feature_dim_s)
    return data, features_a, features_s


def within_block_fraction(data: InteractionSet, spec: SyntheticSpec) -> float:
    """Share of edges whose user and item belong to the same block."""
    if data.num_edges == 0:
        return 0.0
    user_blocks = data.edges[:, 0] // (spec.num_users // spec.num_blocks)
    item_blocks = data.edges[:, 1] // (spec.num_items // spec.num_blocks)
    return float(np.mean(user_blocks == item_blocks))

