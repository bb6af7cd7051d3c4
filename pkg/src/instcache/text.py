"""Word-level tokenizer shared by the n-gram model and the dataset pipeline."""

import unicodedata


def tokenize(text: str, case_fold: bool = True) -> list[str]:
    text = unicodedata.normalize("NFC", text)
    if case_fold:
        text = text.lower()
    return text.split()


def token_count(text: str) -> int:
    return len(text.split())
