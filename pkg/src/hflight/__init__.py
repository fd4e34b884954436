"""Hierarchical federated learning engine and simulator."""

from hflight.topology import NodeKind, NodeSpec, Topology, balanced_tree, from_yaml, selected_subtree, to_yaml, validate
from hflight.model import LossReport, ModelSpec, ParamVector, TrainConfig, evaluate, forward_loss, local_train
from hflight.data import DirichletSplitConfig, FederatedSubsets, LabeledDataset, federated_split, load_idx, synth_blobs
from hflight.strategy import FedAsync, FedAvg, FedProx, FedSGD, Strategy, strategy_from_name
from hflight.dataplane import ParamStore, ProxyRef, TransferLedger
from hflight.runtime import LocalLauncher, RoundRecord, run_async_fl, run_sync_hfl
from hflight.analytics import comm_cost, schedule_metrics

__version__ = "0.1.0"
