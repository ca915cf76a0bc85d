"""Desk-scale simulator of multilingual federated prompt and LoRA tuning."""

from fedpeft.costmodel import CostQuery, comm_cost, reduction_pct, trainable_fraction
from fedpeft.data import (ClientShard, DatasetSpec, LanguageSpec, Partition, generate_synthetic,
                          ingest_jsonl, partition, subsample_language)
from fedpeft.errors import (ConfigError, ContractError, DomainError, FedPeftError, InputError,
                            ProtocolError)
from fedpeft.federation import (ClientUpdate, ExperimentConfig, FederationConfig, ServerState, aggregate,
                                local_update, run_experiment, run_round, select_clients)
from fedpeft.langdist import composite_vector, distance, load_vectors, rank_languages
from fedpeft.model import (Example, ModelConfig, OptimizerState, ParameterSet, adamw_step, count_params,
                           evaluate, forward, init_model, loss_and_grad)

__version__ = "0.1.0"
