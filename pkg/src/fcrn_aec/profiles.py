"""Named parameter profiles shared by framing, network and data generation."""

from dataclasses import dataclass

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Profile:
    name: str
    frame_length: int
    frame_shift: int
    M: int  # feature-map height after zero padding
    F: int
    N: int
    train_count: int
    val_count: int
    test_count: int
    duration: float  # seconds per simulated file

    @property
    def n_bins(self):
        return self.frame_length // 2 + 1


PAPER = Profile("paper", frame_length=512, frame_shift=256, M=260, F=88, N=24,
                train_count=3000, val_count=500, test_count=280, duration=6.0)

# 64-point DFT -> 33 bins padded to 36 rows
DESK = Profile("desk", frame_length=64, frame_shift=32, M=36, F=16, N=8,
               train_count=32, val_count=8, test_count=8, duration=2.0)

PROFILES = {p.name: p for p in (PAPER, DESK)}


def get_profile(name):
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
