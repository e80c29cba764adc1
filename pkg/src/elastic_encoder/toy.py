"""Synthetic two-language corpus with learnable structure, for desk-scale runs."""

from __future__ import annotations

import random

LEXICON = {
    "en": {
        "det": ["the", "a", "every", "some", "this", "that"],
        "adj": ["small", "green", "quiet", "heavy", "bright", "old", "young", "rapid", "gentle", "strange"],
        "noun": ["river", "doctor", "court", "patient", "judge", "garden", "engine", "village", "teacher", "window",
                 "contract", "protein", "virus", "market", "letter", "mountain"],
        "verb": ["sees", "finds", "carries", "treats", "reviews", "builds", "follows", "opens", "signs", "studies"],
        "adv": ["slowly", "today", "again", "carefully", "often", "rarely"],
    },
    "es": {
        "det": ["el", "un", "cada", "algún", "este", "ese"],
        "adj": ["pequeño", "verde", "tranquilo", "pesado", "brillante", "viejo", "joven", "rápido", "suave", "extraño"],
        "noun": ["río", "médico", "tribunal", "paciente", "juez", "jardín", "motor", "pueblo", "maestro", "ventana",
                 "contrato", "proteína", "virus", "mercado", "carta", "montaña"],
        "verb": ["ve", "encuentra", "lleva", "trata", "revisa", "construye", "sigue", "abre", "firma", "estudia"],
        "adv": ["despacio", "hoy", "otra vez", "con cuidado", "a menudo", "rara vez"],
    },
}


def sentence(rng: random.Random, lang: str) -> str:
    lx = LEXICON[lang]
    pick = rng.choice
    if lang == "en":
        words = [pick(lx["det"]), pick(lx["adj"]), pick(lx["noun"]), pick(lx["verb"]), pick(lx["det"]), pick(lx["noun"])]
    else:
        words = [pick(lx["det"]), pick(lx["noun"]), pick(lx["adj"]), pick(lx["verb"]), pick(lx["det"]), pick(lx["noun"])]
    if rng.random() < 0.4:
        words.append(pick(lx["adv"]))
    text = " ".join(words)
    return text[0].upper() + text[1:] + "."


def document(rng: random.Random, lang: str, min_sent: int = 2, max_sent: int = 8) -> str:
    return " ".join(sentence(rng, lang) for _ in range(rng.randint(min_sent, max_sent)))


def corpus(n_docs: int, langs=("en", "es"), seed: int = 0) -> list[str]:
    rng = random.Random(seed)
    return [document(rng, rng.choice(langs)) for _ in range(n_docs)]
