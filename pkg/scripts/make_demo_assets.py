#!/usr/bin/env python3
"""Create demo inputs: a synthetic EEG recording and model checkpoints.

Writes into the given directory (default ./demo):
  recording.sig      22-channel synthetic EEG, 512 Hz, with 60 Hz interference
  tiny.fmbc          small random checkpoint (fast to quantize and run)
  femba_tiny.fmbc    full-shape random checkpoint (~32 MB float)
"""

import argparse
from pathlib import Path

import numpy as np

from femba import container as ct
from femba import image as im
from femba import model as fm

TINY = fm.ModelConfig(d_model=8, d_inner=16, d_state=4, d_conv=4, n_blocks=2,
                      n_tokens=8, n_channels=4, n_samples=32, patch_size=4,
                      n_classes=3, dt_rank=2)


def synthetic_eeg(seconds: float, fs: float, seed: int) -> np.ndarray:
    """Pink-ish noise plus alpha rhythm and mains interference, in microvolts."""
    rng = np.random.default_rng(seed)
    n = int(seconds * fs)
    t = np.arange(n) / fs
    spectrum = rng.normal(size=(22, n // 2 + 1)) + 1j * rng.normal(size=(22, n // 2 + 1))
    freqs = np.fft.rfftfreq(n, 1 / fs)
    spectrum /= np.maximum(freqs, 1.0)  # 1/f rolloff
    x = np.fft.irfft(spectrum, n=n, axis=-1)
    x *= 10.0 / x.std(axis=-1, keepdims=True)
    x += 3.0 * np.sin(2 * np.pi * 10.0 * t + rng.uniform(0, 2 * np.pi, (22, 1)))
    x += 2.0 * np.sin(2 * np.pi * 60.0 * t)
    return x


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--seconds", type=float, default=30.0)
    ap.add_argument("--full", action="store_true",
                    help="also write the full-shape checkpoint (~32 MB)")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ct.write_recording(out / "recording.sig",
                       synthetic_eeg(args.seconds, 512.0, args.seed), 512.0)
    print(f"wrote {out / 'recording.sig'}")

    im.save_checkpoint(fm.init_weights(TINY, seed=args.seed), TINY, out / "tiny.fmbc")
    print(f"wrote {out / 'tiny.fmbc'}")

    if args.full:
        cfg = fm.ModelConfig()
        im.save_checkpoint(fm.init_weights(cfg, seed=args.seed), cfg,
                           out / "femba_tiny.fmbc")
        print(f"wrote {out / 'femba_tiny.fmbc'}")


if __name__ == "__main__":
    main()
