"""Generated desk-scale benchmark.

Customer-style first utterances over 12 intents. Each intent has a pool of
distinct key phrases wrapped in shared carrier phrases and slot fillers, so
a small labeled subset sees only part of each intent's phrasing while the
full text set covers it. Audio is rendered with the stub voice for a pool of
"real" speakers; training and test speakers are disjoint, and the TTS
speaker pool used for augmentation is disjoint from both.

A separate unlabeled corpus of carrier/filler word strings stands in for
general ASR pretraining data.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..corpus import DatasetManifest, Provenance, UtteranceRecord, save_manifest
from ..frontend import CANONICAL_RATE, write_wav
from ..ttsaug import render_stub

INTENT_PHRASES: dict[str, tuple[str, ...]] = {
    "billing": (
        "my bill", "the billing statement", "an invoice", "a charge on my statement", "the monthly statement",
        "a billing question", "my last invoice", "extra charges", "the amount i was billed", "an invoice adjustment",
    ),
    "payment": (
        "make a payment", "pay my balance", "a missed payment", "set up autopay", "pay by card",
        "a payment arrangement", "my payment did not go through", "pay online", "the due date", "a late fee",
    ),
    "cancel": (
        "cancel my service", "close my account", "stop the service", "terminate my contract", "discontinue service",
        "cancel the line", "end my subscription", "shut off service", "disconnect my phone", "cancellation",
    ),
    "upgrade": (
        "upgrade my plan", "a better plan", "more data", "a new phone", "switch plans",
        "an unlimited plan", "add a line", "a family plan", "a faster package", "change my package",
    ),
    "tech_support": (
        "my internet is down", "no signal", "the router keeps dropping", "slow connection", "my phone will not connect",
        "dropped calls", "the modem lights", "no dial tone", "static on the line", "the wifi is not working",
    ),
    "password": (
        "reset my password", "i forgot my password", "locked out", "my login", "change my pin",
        "the security question", "cannot sign in", "a new password", "unlock my account", "my username",
    ),
    "address": (
        "change my address", "i moved", "a new address", "update my mailing address", "moving next month",
        "transfer service to my new home", "the service address", "relocate service", "my billing address", "a move",
    ),
    "order_status": (
        "where is my order", "track my package", "the shipment", "my delivery", "an order i placed",
        "the tracking number", "it has not arrived", "shipping status", "when will it ship", "a backorder",
    ),
    "refund": (
        "a refund", "my money back", "a credit to my account", "reimburse me", "return the device",
        "refund the charge", "a deposit return", "get credited", "a rebate", "overcharged and want it back",
    ),
    "new_account": (
        "open an account", "new service", "sign up", "start service", "become a customer",
        "set up an account", "a new customer", "join", "get service at my house", "enroll",
    ),
    "roaming": (
        "travel abroad", "international roaming", "use my phone overseas", "calling from another country",
        "a travel pass", "roaming charges", "an international plan", "texting abroad", "going to europe",
        "service in mexico",
    ),
    "agent": (
        "speak to a person", "a representative", "talk to someone", "an operator", "a live agent",
        "a supervisor", "customer service", "a human", "the manager", "someone real",
    ),
}

UNSEEN_PHRASES = {"lost_device": ("i lost my phone", "my phone was stolen", "a stolen device")}

CARRIERS = (
    "", "", "i want", "i need", "i am calling about", "yes", "uh", "hi i need", "can you help with",
    "i have a question about", "um", "hello", "i would like", "calling about",
)
SUFFIXES = ("", "", "", "please", "today", "for my account", "thank you", "right now", "again")

GENERAL_WORDS = tuple(
    sorted(
        {w for phrases in INTENT_PHRASES.values() for p in phrases for w in p.split()}
        | {w for c in CARRIERS + SUFFIXES for w in c.split()}
        | set("the weather was nice and we went to see a movie with friends on the weekend it rained".split())
        | set("people talk about work family food music sports news school and the city".split())
    )
)


@dataclass(frozen=True)
class DeskSpec:
    n_train: int = 2000
    n_heldout: int = 200
    n_dev: int = 300
    n_test: int = 500
    n_asr: int = 800
    n_train_speakers: int = 30
    n_test_speakers: int = 10
    multi_intent_rate: float = 0.01
    unseen_rate: float = 0.01
    seed: int = 0


def _sentence(rng: np.random.Generator, phrase: str) -> str:
    carrier = CARRIERS[rng.integers(len(CARRIERS))]
    suffix = SUFFIXES[rng.integers(len(SUFFIXES))]
    return " ".join(w for w in (carrier, phrase, suffix) if w)


def generate_texts(spec: DeskSpec = DeskSpec()) -> dict[str, list[tuple[str, str, tuple[str, ...]]]]:
    """``(id, text, intents)`` triples per split, before audio rendering."""
    rng = np.random.default_rng(spec.seed)
    intents = sorted(INTENT_PHRASES)
    splits: dict[str, list] = {}
    for split, n in (("train", spec.n_train), ("heldout", spec.n_heldout), ("dev", spec.n_dev), ("test", spec.n_test)):
        rows = []
        for i in range(n):
            uid = f"{split}-{i:05d}"
            u = rng.random()
            if split == "test" and u < spec.multi_intent_rate:
                a, b = rng.choice(len(intents), size=2, replace=False)
                pa = INTENT_PHRASES[intents[a]][rng.integers(10)]
                pb = INTENT_PHRASES[intents[b]][rng.integers(10)]
                rows.append((uid, _sentence(rng, f"{pa} and {pb}"), (intents[a], intents[b])))
            elif split == "test" and u < spec.multi_intent_rate + spec.unseen_rate:
                label, phrases = next(iter(UNSEEN_PHRASES.items()))
                rows.append((uid, _sentence(rng, phrases[rng.integers(len(phrases))]), (label,)))
            else:
                intent = intents[rng.integers(len(intents))]
                phrases = INTENT_PHRASES[intent]
                rows.append((uid, _sentence(rng, phrases[rng.integers(len(phrases))]), (intent,)))
        splits[split] = rows
    asr = []
    for i in range(spec.n_asr):
        n_words = int(rng.integers(3, 10))
        words = [GENERAL_WORDS[k] for k in rng.integers(len(GENERAL_WORDS), size=n_words)]
        asr.append((f"asr-{i:05d}", " ".join(words), ()))
    splits["asr"] = asr
    return splits


def prepare_desk_corpus(out_dir: str | os.PathLike, spec: DeskSpec = DeskSpec()) -> dict[str, Path]:
    """Render audio and write one manifest per split; returns manifest paths."""
    out = Path(out_dir)
    texts = generate_texts(spec)
    rng = np.random.default_rng(spec.seed + 1)
    train_speakers = [f"spk{i:03d}" for i in range(spec.n_train_speakers)]
    test_speakers = [f"spk{i:03d}" for i in range(spec.n_train_speakers, spec.n_train_speakers + spec.n_test_speakers)]
    asr_speakers = [f"asr{i:03d}" for i in range(20)]
    paths = {}
    for split, rows in texts.items():
        pool = {"test": test_speakers, "asr": asr_speakers}.get(split, train_speakers)
        records = []
        for uid, text, intents in rows:
            speaker = pool[int(rng.integers(len(pool)))]
            wav = render_stub(text, speaker, seed=spec.seed)
            path = write_wav(out / "wav" / split / f"{uid}.wav", wav, CANONICAL_RATE)
            records.append(
                UtteranceRecord(uid, text, intents, speaker, path.resolve(), len(wav) / CANONICAL_RATE, Provenance.REAL)
            )
        manifest = DatasetManifest.from_records(records, split)
        paths[split] = save_manifest(manifest, out / f"{split}.jsonl")
    return paths


# Desk-scale hyperparameters: a small encoder with frame stacking keeps the
# whole matrix within a CPU budget. Pretraining uses a fixed seed so every
# row starts from the same base acoustic model.
DESK_DEFAULTS: dict = {
    "encoder": {"layers": 2, "hidden_per_direction": 64, "dropout": 0.1, "subsample": 2},
    "embed_dim": 64,
    "perturb": None,
    "am_pretrain": {"epochs": 12, "lr": 2e-3, "seed": 0},
    "am_adapt": {"epochs": 3, "lr": 1e-3},
    "s2i": {"epochs": 40, "lr": 1e-3},
    "text_encoder": {"width": 64, "layers": 2, "heads": 4, "vocab_size": 400},
    "mlm": {"epochs": 5, "lr": 1e-3},
    "t2i": {"epochs": 5, "lr": 1e-3},
    "joint": {"epochs": 30, "mse_weight": 5.0, "alpha": 1.0, "lr_speech": 1e-3, "lr_text": 1e-4},
    "cascade": {"lm_order": 3, "mode": "prefix_beam", "beam": 4, "lm_weight": 0.3},
}

# rows: (name, pipeline, speech fraction, label, reference, overrides)
DESK_ROWS: tuple = (
    ("e2e-low", "e2e", 0.1, "e2e @10% speech", "low", {}),
    ("joint-low", "e2e_joint", 0.1, "joint @10% speech + text", None, {}),
    ("tts-low", "e2e_tts", 0.1, "tts @10% speech + text", None, {"s2i": {"epochs": 5}}),
    ("joint-tts-low", "e2e_joint_tts", 0.1, "joint+tts @10% speech + text", None,
     {"s2i": {"epochs": 5}, "joint": {"epochs": 3}}),
    ("e2e-full", "e2e", 1.0, "e2e @100% speech", "full", {"s2i": {"epochs": 5}}),
    ("cascade-full", "cascade", 1.0, "cascade @100%", None, {}),
    ("cascade-low", "cascade", 0.1, "cascade @10%", None, {}),
)
TREND_ROWS = ("e2e-low", "joint-low", "tts-low", "e2e-full")


def desk_matrix(seeds=(1, 2, 3), rows=None) -> dict:
    """Matrix file content for the desk corpus, paths relative to the corpus dir."""
    experiments = []
    for name, pipeline, fraction, label, reference, overrides in DESK_ROWS:
        if rows is not None and name not in rows:
            continue
        for seed in seeds:
            speech = {"manifest": "train.jsonl", "fraction": fraction, "seed": seed}
            data = {"am_adapt": speech, "test": {"manifest": "test.jsonl"}}
            if pipeline == "cascade":
                data.update(lm=speech, t2i=speech)
            else:
                data["s2i"] = speech
            exp = {"name": f"{name}-s{seed}", "pipeline": pipeline, "seed": seed, "label": label, "data": data}
            if reference:
                exp["reference"] = reference
            exp.update(overrides)
            experiments.append(exp)
    defaults = dict(DESK_DEFAULTS)
    defaults["data"] = {
        "am_pretrain": {"manifest": "asr.jsonl", "seed": 0},
        "t2i": {"manifest": "train.jsonl"},
        "tts_source": {"manifest": "train.jsonl"},
    }
    return {"defaults": defaults, "experiments": experiments}
