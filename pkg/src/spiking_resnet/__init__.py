"""Desk-scale residual CNNs, their conversion to integrate-and-fire spiking
networks, and clock-driven simulation of the result."""

__version__ = "0.1.0"

from .convert import (
    ActivationScales,
    ConversionReport,
    ConvertOptions,
    apply_compensation,
    collect_scales,
    convert,
    fold_batchnorm,
    fold_graph,
    normalize_graph,
    normalize_weights,
    search_compensation,
    shortcut_scale,
    tau_max,
)
from .datasets import Dataset, load_cifar10_bin, load_cifar100_bin, load_mnist_idx, split
from .graph import ActivationRecord, LayerKind, LayerNode, ModelGraph, build_plain, build_resnet
from .model_io import load_model, load_snn, save_model, save_snn
from .ops import BatchNormParams, batchnorm_forward, conv2d, fully_connected, \
    global_avg_pool, percentile, relu
from .simulate import IFNeuronLayer, RunReport, SpikingNetwork, encode_input, evaluate, \
    if_step, rate_profile, simulate
from .training import TrainConfig, augment, lr_at_epoch, sgd_momentum_step, standardize, train
