"""Greedy and beam-search decoding over a :class:`DecoderStub`."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool

    @property
    def score(self) -> float:
        """Cumulative log-probability divided by the number of generated tokens."""
        return self.logprob / max(1, len(self.tokens))


def greedy(prompt: np.ndarray, decoder, max_len: int = 64) -> Hypothesis:
    tokens: list[int] = []
    total = 0.0
    for _ in range(max_len):
        lp = decoder.next_logprobs(prompt, [tokens])[0]
        tok = int(np.argmax(lp))
        tokens.append(tok)
        total += float(lp[tok])
        if tok == decoder.eos_id:
            return Hypothesis(tuple(tokens), total, True)
    return Hypothesis(tuple(tokens), total, False)


def beam_search(prompt: np.ndarray, decoder, beam_size: int = 5, max_len: int = 64) -> list[Hypothesis]:
    """Ranked, distinct hypotheses (best first, at most ``beam_size``).

    Beams are pruned on cumulative log-probability and the final ranking uses
    the length-normalised score. The greedy hypothesis joins the final pool,
    so the top result never scores below greedy decoding.
    """
    eos = decoder.eos_id
    live = [Hypothesis((), 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        lp = decoder.next_logprobs(prompt, [list(h.tokens) for h in live])
        totals = np.array([h.logprob for h in live])[:, None] + lp
        order = np.argsort(-totals, axis=None, kind="stable")
        vocab = lp.shape[1]
        nxt = []
        for flat in order:
            i, tok = divmod(int(flat), vocab)
            hyp = Hypothesis(live[i].tokens + (tok,), float(totals[i, tok]), tok == eos)
            if hyp.finished:
                finished.append(hyp)
            else:
                nxt.append(hyp)
                if len(nxt) == beam_size:
                    break
        live = nxt
        if not live or len(finished) >= beam_size:
            break
    truncated = [h for h in live if len(h.tokens) >= max_len]
    pool = finished + truncated + [greedy(prompt, decoder, max_len)]
    best: dict[tuple[int, ...], Hypothesis] = {}
    for h in pool:
        if h.tokens not in best or h.score > best[h.tokens].score:
            best[h.tokens] = h
    ranked = sorted(best.values(), key=lambda h: (-h.score, h.tokens))
    return ranked[:beam_size]
