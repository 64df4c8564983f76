"""Surrogate labels: the aligned teacher answers unlabeled triplets."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .store import TripletDataset, _as_array, format_triplets, load_triplets, save_triplets, validate_pairing
from .triplets import most_similar_pair, triplet_probs, triplet_similarities


def label_triplets(teacher, triplets: TripletDataset, tau: float = 1.0, transform_hash: str = "none") -> TripletDataset:
    """Hard odd-one-out choice plus soft probability triple for every triplet.

    Rows whose two largest pair similarities are exactly equal get the
    canonical (earliest pair) choice and are flagged in ``ties``.
    """
    x = _as_array(teacher)
    validate_pairing(x, triplets)
    s = triplet_similarities(x, triplets.triplets)
    soft = triplet_probs(s, tau)
    choice = most_similar_pair(s)
    top = np.sort(s, axis=1)
    ties = top[:, 2] == top[:, 1]
    # near ties can round to equal probabilities; the stored soft triple wins
    disagree = np.flatnonzero(np.argmax(soft, axis=1) != choice)
    ties[disagree] = True
    choice[disagree] = np.argmax(soft[disagree], axis=1)
    return TripletDataset(
        triplets.triplets.copy(),
        choice=choice,
        soft=soft,
        source_tag=triplets.meta.get("source") or triplets.source_tag,
        ties=ties,
        meta={"transform": transform_hash, "tau": repr(float(tau)), "ties": str(int(ties.sum()))},
    )


def _header(ds: TripletDataset) -> list[str]:
    return [f"transform={ds.meta.get('transform', 'none')} tau={ds.meta.get('tau', '1.0')}",
            f"ties={ds.meta.get('ties', '0')} source={ds.source_tag.replace(' ', '_') or 'unknown'}"]


def format_alignet(ds: TripletDataset) -> str:
    if ds.kind != "both":
        raise ValidationError("an AligNet dataset needs both hard and soft labels")
    return format_triplets(ds, "alignet", _header(ds))


def save_alignet(ds: TripletDataset, path) -> None:
    if ds.kind != "both":
        raise ValidationError("an AligNet dataset needs both hard and soft labels")
    save_triplets(ds, path, "alignet", _header(ds))


def load_alignet(path, m: int | None = None) -> TripletDataset:
    return load_triplets(path, "alignet", m=m)
