"""Regenerate tests/data/golden_logits.npy (run only after an intended model change)."""

from pathlib import Path

import numpy as np
import torch

from rotlab.toymodel import ModelConfig, build_model, forward

GOLDEN_CFG = ModelConfig(L=2, D=32, n_heads=2, D_ffn=64, vocab=16, T_ctx=16, seed=0)


def golden_tokens() -> np.ndarray:
    return np.random.default_rng(2024).integers(0, GOLDEN_CFG.vocab, size=(2, GOLDEN_CFG.T_ctx))


def main():
    torch.set_num_threads(1)
    logits = forward(build_model(GOLDEN_CFG), golden_tokens()).logits
    out = Path(__file__).resolve().parents[1] / "tests" / "data" / "golden_logits.npy"
    np.save(out, logits)
    print(f"wrote {out} {logits.shape}")


if __name__ == "__main__":
    main()
