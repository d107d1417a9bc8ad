import json
from pathlib import Path

import numpy as np
import pytest

from mmdial.builder import (BuilderConfig, EntityManifest, TurnImageManifest,
                            build_examples)
from mmdial.corpus import CaptionedImage, DialogueSession, Turn, chunk_sessions
from mmdial.entities import (DictionaryTagger, MockSearchClient, extract_entities,
                             fetch_images)
from mmdial.model import ModelConfig
from mmdial.retrieval import HashEmbedder, build_index, retrieve_for_sessions
from mmdial.tokenizer import Tokenizer

DATA_DIR = Path(__file__).parent / "data"


def make_session(session_id="s1", texts=None, domain="daily", knowledge=None):
    texts = texts or [
        "i love ikebana and flowers",
        "flowers are pretty in gardens",
        "do you like gardens too",
        "yes gardens are full of flowers",
    ]
    turns = [Turn(speaker="AB"[i % 2], text=t, index=i) for i, t in enumerate(texts)]
    return DialogueSession(session_id=session_id, turns=turns, domain_tag=domain,
                           knowledge_passages=knowledge)


def write_sessions_file(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def make_pool(n=8, tags=("pool-A", "pool-B", "pool-C", "pool-D"), d_v=4, with_features=True):
    rng = np.random.default_rng(7)
    pool = []
    for i in range(n):
        feature = rng.standard_normal(d_v).round(4).tolist() if with_features else None
        pool.append(CaptionedImage(
            image_id=f"img{i:03d}",
            caption=f"a photo number {i} of flowers and gardens scene {i % 3}",
            source_tag=tags[i % len(tags)],
            feature=feature,
        ))
    return pool


@pytest.fixture
def session():
    return make_session()


@pytest.fixture
def pool():
    return make_pool()


@pytest.fixture
def fixture_taggers():
    return DictionaryTagger(["Ikebana"]), DictionaryTagger(["flower", "garden"])


def build_fixture_examples(session=None, pool=None, k=3, images_per_entity=1,
                           builder_cfg=None, knowledge=None):
    """One-stop pipeline run over the tiny fixture conversation."""
    session = session or make_session(knowledge=knowledge,
                                      domain="knowledge-grounded" if knowledge else "daily")
    pool = pool or make_pool()
    chunks = chunk_sessions([session], 2)
    emb = HashEmbedder(dimension=16, seed=1)
    index = build_index(pool, emb)
    results = retrieve_for_sessions([session], index, emb, k=k)
    ner, pos = DictionaryTagger(["Ikebana"]), DictionaryTagger(["flower", "garden"])
    ents = extract_entities(session, ner, pos)
    client = MockSearchClient(seed=0, feature_dim=4, n_available=3,
                              rate_per_sec=10000.0)
    fetched = [fetch_images(e, [client], 2) for e in ents]
    cfg = builder_cfg or BuilderConfig(images_per_entity=images_per_entity)
    examples = build_examples(chunks, TurnImageManifest(results, pool),
                              EntityManifest(fetched), cfg)
    return examples, session, pool, fetched


@pytest.fixture
def toy_tokenizer():
    words = [f"w{i}" for i in range(26)]
    return Tokenizer(words)


def toy_model_config(tokenizer, variant="shared", **kwargs):
    defaults = dict(d_model=32, n_layers=2, n_heads=4, max_positions=128, d_v=4)
    defaults.update(kwargs)
    return ModelConfig.for_tokenizer(tokenizer, variant=variant, **defaults)
