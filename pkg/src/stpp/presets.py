"""Desk-scale preset: a pinwheel dataset and network small enough to train
on a laptop CPU in minutes while exercising every mechanism end to end.

The temporal process is a strongly self-exciting Hawkes model (branching
ratio 0.9, decay slower than the within-burst spacing) so the history
carries real information about upcoming intervals, and the generator seed
is chosen so the globally largest inter-event interval falls inside the
first window's input region: no window ever scores the normalization
boundary value as an output.

Training uses the zero-decoder-input mode: at this data scale, feeding
true outputs to the decoder lets the network shortcut through the copy
channel (the target location is part of the decoder input) and collapse
under test-time zero padding long before the history conditioning
matures, whereas the zero-input mode matches deployment conditions
exactly and measures the encoder's contribution directly.
"""

from __future__ import annotations

from .classical import TemporalModelParams
from .events import SequenceDataset, build_dataset
from .neural import NetConfig
from .rng import make_rng
from .simulate import PinwheelConfig, make_pinwheel_dataset
from .train import TrainConfig

DESK_SEED = 2
DESK_SEQ_LEN = 60
DESK_OVERLAP = 58
DESK_L_OUT = 3

DESK_HAWKES = TemporalModelParams.hawkes(mu=0.1, alpha=0.9, beta=0.3)
DESK_PINWHEEL = PinwheelConfig()  # 15 clusters x 150 events


def desk_events():
    return make_pinwheel_dataset(DESK_PINWHEEL, DESK_HAWKES, make_rng(DESK_SEED))


def desk_dataset() -> SequenceDataset:
    return build_dataset(
        desk_events(),
        seq_len=DESK_SEQ_LEN,
        overlap=DESK_OVERLAP,
        l_out=DESK_L_OUT,
        seed=DESK_SEED,
    )


def desk_net_config() -> NetConfig:
    return NetConfig(
        d_space=2,
        n_in=DESK_SEQ_LEN - DESK_L_OUT,
        l_out=DESK_L_OUT,
        d_model=32,
        n_layers=2,
        n_heads=2,
        dropout=0.15,
    )


def desk_train_config(epochs: int = 100) -> TrainConfig:
    return TrainConfig(
        epochs=epochs,
        batch_size=32,
        lr0=1e-3,
        patience=10,
        seed=DESK_SEED,
        ablation="zero_decoder",
    )
