"""Flat ``key = value`` config files for the simulator and the scorer.

Blank lines and lines starting with ``#`` are ignored. Example simulator config::

    n_images = 40
    annotators_per_image = 7
    accuracies = 0.95, 0.95, uniform, uniform, uniform, uniform, uniform
    seed = 3
"""

from __future__ import annotations

from typing import Dict, Optional

from .core import ClassTaxonomy, ScoringConfig
from .simulator import SimConfig, accuracy_confusion


def read_kv(path) -> Dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


_SIM_INT = ("n_images", "annotators_per_image", "gold_per_level", "level_size", "seed")
_SIM_FLOAT = ("mean_boxes", "jitter_sigma", "size_jitter", "miss_prob", "add_prob", "width", "height", "min_size", "max_size")


def _accuracy(tok: str) -> Optional[float]:
    tok = tok.strip().lower()
    return None if tok in ("uniform", "guess", "random") else float(tok)


def sim_config_from_dict(raw: Dict[str, str], taxonomy: Optional[ClassTaxonomy] = None) -> SimConfig:
    raw = dict(raw)
    if "classes" in raw:
        taxonomy = ClassTaxonomy(tuple(s.strip() for s in raw.pop("classes").split(",")))
    taxonomy = taxonomy or ClassTaxonomy()
    kw = {"taxonomy": taxonomy}
    for k in _SIM_INT:
        if k in raw:
            kw[k] = int(raw.pop(k))
    for k in _SIM_FLOAT:
        if k in raw:
            kw[k] = float(raw.pop(k))
    if "class_probs" in raw:
        kw["class_probs"] = tuple(float(v) for v in raw.pop("class_probs").split(","))
    if "accuracies" in raw:
        accs = [_accuracy(t) for t in raw.pop("accuracies").split(",")]
    else:
        n = int(raw.pop("n_annotators", kw.get("annotators_per_image", 5)))
        acc = _accuracy(raw.pop("accuracy", "1.0"))
        accs = [acc] * n
    if raw:
        raise ValueError(f"unknown simulator config keys: {', '.join(sorted(raw))}")
    kw["confusions"] = tuple(accuracy_confusion(a, len(taxonomy)) for a in accs)
    return SimConfig(**kw)


def load_sim_config(path, taxonomy: Optional[ClassTaxonomy] = None) -> SimConfig:
    return sim_config_from_dict(read_kv(path), taxonomy)


def _bool(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def load_scoring_config(path, **defaults) -> ScoringConfig:
    """Read a key=value scoring file; ``defaults`` fill keys the file leaves out."""
    raw = read_kv(path)
    kw = dict(defaults)
    for k in ("m_bb_max", "m_max_classes"):
        if k in raw:
            kw[k] = float(raw.pop(k))
    for k in ("include_diversity", "include_density"):
        if k in raw:
            kw[k] = _bool(raw.pop(k))
    if raw:
        raise ValueError(f"unknown scoring config keys: {', '.join(sorted(raw))}")
    return ScoringConfig(**kw)
