#!/usr/bin/env python3
"""The styled pseudo-speech corpus and the measurements that recover its ground truth."""

# %%
import numpy as np

from rtivae import metrics as mt
from rtivae import synthgen as sg

# %% [markdown]
# Each sample has a pitch, a speaking rate, a pause and an accent class.
# Frames are log band energies of a harmonic carrier, 8 frames per token
# at rate 1, so the length is round(rate * 8 * n_tokens) + pause.

# %%
attrs = sg.StyleAttributes(f0=210.0, rate=1.2, pause_frames=7, accent=1, noise_level=0.02)
s = sg.generate_sample(4, attrs, [3, 1, 4, 1, 5])
print("frames", s.frames.shape, "expected length", sg.expected_length(1.2, 5, 7))
print("measured pause", mt.measure_pause(s.frames))
print("estimated f0", mt.estimate_f0(s.waveform[: 4 * 6 * sg.HOP]))

# %% [markdown]
# A dataset draws the accent-dependent pitch (40 Hz apart on average) and
# uniform rate and pause, then splits 80/10/10.

# %%
ds = sg.generate_dataset(sg.DatasetConfig(n_per_class=100, seed=0))
for key, row in sorted(sg.summarize(ds).items()):
    print(key, row)

# %%
train = ds.split("train")
for c in (0, 1):
    f0 = np.array([x.attrs.f0 for x in train if x.y_o == c])
    print(f"class {c}: f0 {f0.mean():.1f} +/- {f0.std():.1f} Hz")
