#!/usr/bin/env python3
"""End-to-end deployment walkthrough on synthetic data.

Preprocesses a recording into normalized windows, quantizes a checkpoint to
W8A8 and W2A8 deployment images, runs the integer engine on every window,
verifies bit-exactness against the integer-semantics reference, and compares
image sizes. Exercises the same code paths as the CLI, in-process.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from femba import container as ct
from femba import engine as eng
from femba import image as im
from femba import model as fm
from femba import quantizer as qz
from femba import reference as ref
from femba import signal_pipeline as sigp


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--demo-dir", default="demo")
    ap.add_argument("--full", action="store_true",
                    help="use the full-shape checkpoint (slower)")
    ap.add_argument("--windows", type=int, default=4)
    args = ap.parse_args()
    demo = Path(args.demo_dir)

    samples, rate = ct.read_recording(demo / "recording.sig")
    wins, _ = sigp.preprocess_recording(sigp.RawRecording(samples, rate))
    print(f"preprocessed {len(wins)} windows of shape {wins[0].data.shape}")

    ckpt = demo / ("femba_tiny.fmbc" if args.full else "tiny.fmbc")
    weights, cfg = im.load_checkpoint(ckpt)
    if not args.full:
        # the tiny checkpoint expects 4-channel, 32-sample windows; resample
        # the real windows down to that shape for the demo
        small = [w.data[:cfg.n_channels, :cfg.n_samples] for w in wins]
    else:
        small = [w.data for w in wins]
    calib = small[:max(2, min(8, len(small)))]
    run_windows = small[:args.windows]

    sizes = {}
    for mode in ("w8a8", "w2a8"):
        t0 = time.time()
        art = qz.quantize_model(weights, cfg, mode, calib)
        container = im.build_image(cfg, art)
        blob = container.tobytes()
        sizes[mode] = len(blob)
        img = im.load_image(container)
        print(f"\n[{mode}] quantized in {time.time() - t0:.1f} s, "
              f"image {len(blob):,} B")

        for j, win in enumerate(run_windows):
            tr_e, tr_r = {}, {}
            li, lf, stats = eng.engine_forward(img, win, trace=tr_e)
            li_r, _ = ref.reference_int_forward(img, win, trace=tr_r)
            exact = all(np.array_equal(tr_e[k], tr_r[k]) for k in tr_r)
            flt = fm.forward(win, weights, cfg)
            print(f"  window {j}: logits_i32={li.tolist()} "
                  f"float_argmax={int(np.argmax(flt))} "
                  f"int_argmax={int(np.argmax(lf))} "
                  f"bit_exact={exact} scan_sat={stats.saturation_rate:.4%}")
            assert exact

    ratio = sizes["w2a8"] / sizes["w8a8"]
    print(f"\nimage sizes: w8a8 {sizes['w8a8']:,} B, w2a8 {sizes['w2a8']:,} B "
          f"({1 - ratio:.1%} smaller)")


if __name__ == "__main__":
    main()
