"""Shared builders for the test suite: synthetic corpora and tiny encoders."""

import numpy as np

from odnlp.corpus import DeathRecord, LabelVector, LabeledCase, default_schema
from odnlp.embeddings import VectorTable

SCHEMA = default_schema()

# One signature token per directly annotated class; umbrella classes follow.
DRUG_TOKENS = {
    "heroin": "heroin",
    "fentanyl": "fentanyl",
    "prescription_opioids": "oxycodone",
    "methamphetamine": "methamphetamine",
    "cocaine": "cocaine",
    "benzodiazepines": "alprazolam",
    "alcohol": "ethanol",
    "others": "gabapentin",
}
OPIOID_CLASSES = ("heroin", "fentanyl", "prescription_opioids")
FILLER = ("acute", "mixed", "toxicity", "intoxication", "combined",
          "effects", "cardiac", "arrest", "complicating", "use")

TINY_VOCAB = (["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
              + list(DRUG_TOKENS.values()) + list(FILLER))


def make_keyword_corpus(n, seed=0, p_empty=0.15):
    """Synthetic cause-of-death corpus whose labels track keyword presence."""
    rng = np.random.default_rng(seed)
    classes = list(DRUG_TOKENS)
    cases = []
    for i in range(n):
        if rng.random() < p_empty:
            chosen = []
        else:
            k = int(rng.integers(1, 4))
            chosen = [str(c) for c in rng.choice(classes, size=k, replace=False)]
        bits = {cls: 0 for cls in SCHEMA.classes}
        for cls in chosen:
            bits[cls] = 1
        if any(bits[c] for c in OPIOID_CLASSES):
            bits["any_opioids"] = 1
        if chosen:
            bits["any_drugs"] = 1
        words = [str(rng.choice(FILLER))]
        for cls in chosen:
            words.append(DRUG_TOKENS[cls])
            if rng.random() < 0.5:
                words.append(str(rng.choice(FILLER)))
        words.append(str(rng.choice(FILLER)))
        text = " ".join(words)
        record = DeathRecord(case_id=f"case{i:05d}", primary_cause=text)
        gold = LabelVector(tuple(bits[c] for c in SCHEMA.classes))
        cases.append(LabeledCase(record=record, normalized_text=text, gold=gold))
    return cases


def case_texts(cases):
    return [c.normalized_text for c in cases]


def toy_vector_table(dim=16, seed=5):
    """Vector table over the corpus vocabulary; drug tokens get strong axes."""
    rng = np.random.default_rng(seed)
    entries = {}
    drugs = list(DRUG_TOKENS.values())
    for j, token in enumerate(drugs):
        vec = rng.normal(scale=0.05, size=dim)
        vec[j] += 4.0
        entries[token] = vec
    for token in FILLER:
        entries[token] = rng.normal(scale=0.3, size=dim)
    return VectorTable(dim=dim, entries=entries)


def write_toy_vector_table(path, dim=16, seed=5):
    """Serialize toy_vector_table to a word-per-line text file."""
    table = toy_vector_table(dim=dim, seed=seed)
    with open(path, "w", encoding="utf-8") as handle:
        for token, vec in table.entries.items():
            parts = " ".join(f"{v:.8f}" for v in vec)
            handle.write(f"{token} {parts}\n")
    return str(path)


def write_corpus_files(cases, records_path, labels_path):
    """Write ingestable records and gold-label CSVs for a synthetic corpus."""
    import csv

    with open(records_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["case_id", "primary_cause"])
        for case in cases:
            writer.writerow([case.case_id, case.record.primary_cause])
    with open(labels_path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["case_id", *SCHEMA.classes])
        for case in cases:
            writer.writerow([case.case_id, *case.gold.bits])
    return str(records_path), str(labels_path)


def build_tiny_encoder(directory, hidden=64, layers=2, heads=2,
                       max_len=32, seed=0):
    """Save a small randomly initialized encoder plus tokenizer to a dir."""
    import torch
    from transformers import BertConfig, BertModel, BertTokenizerFast

    directory = str(directory)
    vocab = {tok: i for i, tok in enumerate(TINY_VOCAB)}
    tokenizer = BertTokenizerFast(vocab=vocab, model_max_length=max_len)
    config = BertConfig(
        vocab_size=len(vocab),
        hidden_size=hidden,
        num_hidden_layers=layers,
        num_attention_heads=heads,
        intermediate_size=hidden * 4,
        max_position_embeddings=max_len,
        pad_token_id=0,
    )
    torch.manual_seed(seed)
    model = BertModel(config)
    tokenizer.save_pretrained(directory)
    model.save_pretrained(directory)
    return directory
