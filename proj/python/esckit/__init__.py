"""Python access to the esckit core.

Functions ending in ``_json``/``_jsonl`` in the extension return JSON text;
the wrappers here decode it.
"""

import json

from . import _core
from ._core import (  # noqa: F401
    EsckitError,
    ScriptedSession,
    bleu,
    builtin_profiles,
    distinct,
    length_ratio,
    rouge_l,
    stats_table,
    tokenize,
)

__all__ = [
    "EsckitError",
    "ScriptedSession",
    "bleu",
    "builtin_profiles",
    "corpus_stats",
    "distinct",
    "extract_instances",
    "length_ratio",
    "read_corpus",
    "rouge_l",
    "sample_situation",
    "score_corpus",
    "split",
    "stats_table",
    "step",
    "taxonomy",
    "tokenize",
]


def taxonomy(spec="cpsdd"):
    return json.loads(_core.taxonomy_json(spec))


def read_corpus(path, taxonomy="cpsdd"):
    return [json.loads(line) for line in _core.read_corpus_jsonl(str(path), taxonomy)]


def corpus_stats(path, taxonomy="cpsdd", mode="mixed"):
    return json.loads(_core.corpus_stats_json(str(path), taxonomy, mode))


def extract_instances(path, taxonomy="cpsdd"):
    return [json.loads(line) for line in _core.extract_instances_jsonl(str(path), taxonomy)]


def split(path, seed=42, mode="by_dialogue", taxonomy="cpsdd"):
    return json.loads(_core.split_json(str(path), seed, mode, taxonomy))


def sample_situation(seed, taxonomy="cpsdd"):
    return json.loads(_core.sample_situation_json(seed, taxonomy))


def score_corpus(pairs, predicted=None, gold=None, mode="mixed"):
    return json.loads(_core.score_corpus_json(list(pairs), predicted, gold, mode))


def step(session, text):
    """Send one user message through a ScriptedSession; returns the envelope."""
    return json.loads(session.step_json(text))
