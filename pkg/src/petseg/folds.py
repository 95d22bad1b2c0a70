"""Subject-grouped K-fold and hold-out splits over a study manifest."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleSplitError, ValidationError


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    subject_id: str
    paths: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not self.study_id or not self.subject_id:
            raise ValidationError("study_id and subject_id must be non-empty")

    def to_dict(self) -> dict:
        return {"study_id": self.study_id, "subject_id": self.subject_id, "paths": self.paths}


def load_manifest(path) -> list:
    with open(path) as fh:
        entries = json.load(fh)
    return parse_manifest(entries)


def parse_manifest(entries) -> list:
    studies = [StudyRecord(e["study_id"], e["subject_id"], e.get("paths", {})) for e in entries]
    seen = set()
    for s in studies:
        if s.study_id in seen:
            raise ValidationError(f"duplicate study_id {s.study_id!r}")
        seen.add(s.study_id)
    return studies


def _groups(studies) -> dict:
    groups = defaultdict(list)
    ids = set()
    for s in studies:
        if s.study_id in ids:
            raise ValidationError(f"duplicate study_id {s.study_id!r}")
        ids.add(s.study_id)
        groups[s.subject_id].append(s.study_id)
    return {k: sorted(v) for k, v in groups.items()}


def _shuffled_subjects(groups: dict, seed: int) -> list:
    subjects = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(subjects))
    return [subjects[i] for i in order]


@dataclass
class FoldAssignment:
    k: int
    seed: int
    assignment: dict

    def fold(self, i: int) -> list:
        return sorted(s for s, f in self.assignment.items() if f == i)

    def sizes(self) -> list:
        counts = [0] * self.k
        for f in self.assignment.values():
            counts[f] += 1
        return counts

    def to_json(self) -> str:
        folds = {s: self.assignment[s] for s in sorted(self.assignment)}
        return json.dumps({"seed": self.seed, "k": self.k, "folds": folds}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FoldAssignment":
        d = json.loads(text)
        return cls(d["k"], d["seed"], dict(d["folds"]))


def grouped_kfold(studies, k: int = 5, seed: int = 0) -> FoldAssignment:
    """Shuffle subjects with ``seed``, then give each to the fold with fewest studies (ties: lowest index)."""
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    groups = _groups(studies)
    if len(groups) < k:
        raise InfeasibleSplitError(f"{len(groups)} subjects cannot fill {k} folds")
    counts = [0] * k
    assignment = {}
    for subject in _shuffled_subjects(groups, seed):
        target = min(range(k), key=lambda f: (counts[f], f))
        for sid in groups[subject]:
            assignment[sid] = target
        counts[target] += len(groups[subject])
    return FoldAssignment(k, seed, assignment)


@dataclass
class HoldoutSplit:
    train: list
    holdout: list
    target: int
    exact: bool

    @property
    def warning(self) -> str | None:
        if self.exact:
            return None
        return f"subject grouping forced a hold-out of {len(self.holdout)} studies instead of {self.target}"


def holdout_split(studies, n_holdout: int, seed: int = 0) -> HoldoutSplit:
    """Two-way subject-grouped split with a hold-out as close to ``n_holdout`` studies as grouping allows.

    Subset-sum over subject group sizes finds the closest achievable size
    (ties go to the smaller one); subjects are taken from a seeded shuffle.
    """
    studies = list(studies)
    total = len(studies)
    if not 0 < n_holdout < total:
        raise InfeasibleSplitError(f"hold-out size {n_holdout} must lie strictly between 0 and {total}")
    groups = _groups(studies)
    order = _shuffled_subjects(groups, seed)
    sizes = [len(groups[s]) for s in order]

    # reach[i][t]: some subset of the first i subjects sums to t
    reach = np.zeros((len(order) + 1, total + 1), dtype=bool)
    reach[0, 0] = True
    for i, sz in enumerate(sizes):
        reach[i + 1] = reach[i]
        reach[i + 1, sz:] |= reach[i, :-sz]

    feasible = [t for t in range(1, total) if reach[-1, t]]
    if not feasible:
        raise InfeasibleSplitError("a single subject holds every study")
    best = min(feasible, key=lambda t: (abs(t - n_holdout), t))
    if abs(best - n_holdout) > max(sizes):
        raise InfeasibleSplitError(f"closest feasible hold-out {best} is too far from {n_holdout}")

    chosen = set()
    t = best
    for i in range(len(order), 0, -1):
        if not reach[i - 1, t]:
            chosen.add(order[i - 1])
            t -= sizes[i - 1]
    by_id = {s.study_id: s for s in studies}
    hold_ids = sorted(sid for subj in chosen for sid in groups[subj])
    train_ids = sorted(set(by_id) - set(hold_ids))
    return HoldoutSplit(
        [by_id[s] for s in train_ids], [by_id[s] for s in hold_ids], n_holdout, best == n_holdout
    )
