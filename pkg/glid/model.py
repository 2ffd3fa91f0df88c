"""
GLID model: shared encoder/pyramid/decoder trunk plus swappable task heads

Also owns the load policies that decide which pre-trained parameters a
fine-tuning run copies by name.
"""
import logging
from typing import Dict, Iterable, List, Optional, Tuple

from checkpoint_io import Checkpoint
from encoder_pyramid import Encoder, EncoderConfig, FeaturePyramid
from exceptions import ConfigError, PolicyError, TaskError
from masking import MaskPlan
from nn_layers import ParamStore
from query_decoder import (AttentionHook, DecoderConfig, QueryDecoder, build_finetune_queries,
                           build_pretrain_queries, create_query_params)
from task_heads import HeadOutput, ReconOutput, TaskSpec, build_head, head_forward, task_spec
from tensor_core import Tensor

model_logger = logging.getLogger('glid.model')

LOAD_POLICIES = ('none', 'backbone', 'backbone_fpn', 'full')
_BACKBONE = ('encoder.', 'queries.cls')
POLICY_PREFIXES = {
    'none': (),
    'backbone': _BACKBONE,
    'backbone_fpn': _BACKBONE + ('fpn.',),
    'full': _BACKBONE + ('fpn.', 'decoder.', 'queries.'),
}


def policy_prefixes(policy: str) -> Tuple[str, ...]:
    try:
        return POLICY_PREFIXES[policy]
    except KeyError:
        raise PolicyError(f"Unknown load policy: {policy}") from None


def select_names(names: Iterable[str], policy: str) -> List[str]:
    """Parameter names a policy copies; task heads are never part of any policy"""
    prefixes = policy_prefixes(policy)
    return [n for n in names if n.startswith(prefixes) and not n.startswith('head.')]


class GlidModel:
    def __init__(self, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig, seed: int = 0):
        if decoder_cfg.levels != encoder_cfg.num_stages:
            raise ConfigError('Invalid model config', 'model',
                              [f'decoder levels ({decoder_cfg.levels}) must equal encoder stages '
                               f'({encoder_cfg.num_stages})'])
        self.encoder_cfg = encoder_cfg
        self.decoder_cfg = decoder_cfg
        self.store = ParamStore(seed)
        self.encoder = Encoder(self.store, encoder_cfg)
        self.decoder = QueryDecoder(self.store, decoder_cfg, encoder_cfg.fpn_dim)
        create_query_params(self.store, decoder_cfg.dim)
        self.heads: Dict[str, TaskSpec] = {}

    # ------------------------------------------------------------------ #
    # Heads
    # ------------------------------------------------------------------ #
    def add_head(self, spec: TaskSpec) -> TaskSpec:
        build_head(self.store, spec, self.decoder_cfg.dim, self.encoder_cfg.fpn_dim, self.encoder_cfg.patch_size)
        self.heads[spec.task] = spec
        return spec

    def head(self, task: str) -> TaskSpec:
        if task not in self.heads:
            raise TaskError(f"Model has no head for task {task}")
        return self.heads[task]

    # ------------------------------------------------------------------ #
    # Forward passes
    # ------------------------------------------------------------------ #
    def pretrain_forward(self, image, plan: MaskPlan, attn_hook: Optional[AttentionHook] = None
                         ) -> Tuple[ReconOutput, Tensor]:
        """Visible-token encoding, [CLS] + mask-token queries, pixel head on the mask queries"""
        spec = self.head('pretrain')
        features = self.encoder.encode_visible(image, plan)
        queries = build_pretrain_queries(plan, self.store)
        hidden = self.decoder.decode(queries, features, attn_hook)
        return head_forward(spec, hidden, self.store), hidden

    def finetune_forward(self, image, task: str, attn_hook: Optional[AttentionHook] = None
                         ) -> Tuple[HeadOutput, Tensor, Tensor]:
        """
        Full-image encoding and task decoding

        Returns:
            tuple: (head output, 1/4-scale fused map f_b, decoder hidden states)
        """
        spec = self.head(task)
        pyramid: FeaturePyramid = self.encoder.encode_full(image)
        queries = build_finetune_queries(spec.num_queries, self.store['queries.cls'],
                                         self.store[f"{spec.prefix}.query_embed"])
        hidden = self.decoder.decode(queries, pyramid, attn_hook)
        return head_forward(spec, hidden, self.store), pyramid.quarter_map, hidden

    # ------------------------------------------------------------------ #
    # Weights
    # ------------------------------------------------------------------ #
    def policy_names(self, policy: str) -> List[str]:
        return select_names(self.store.names(), policy)

    def apply_policy(self, checkpoint: Optional[Checkpoint], policy: str) -> List[str]:
        """
        Copy the parameters selected by ``policy`` from ``checkpoint``

        Every selected name must be present with the same shape, otherwise
        nothing is copied and PolicyError lists the offenders.

        Returns:
            list: loaded parameter names
        """
        required = self.policy_names(policy)
        if not required:
            return []
        if checkpoint is None:
            raise PolicyError(f"Load policy {policy} requires a checkpoint")
        missing = [n for n in required if n not in checkpoint.tensors]
        mismatched = {n: (tuple(checkpoint.tensors[n].shape), self.store[n].shape)
                      for n in required if n in checkpoint.tensors and checkpoint.tensors[n].shape != self.store[n].shape}
        if missing or mismatched:
            raise PolicyError(f"Checkpoint is incompatible with load policy {policy}", missing, mismatched)
        self.store.load_arrays(checkpoint.tensors, required)
        model_logger.info("Loaded pre-trained weights", extra={'policy': policy, 'loaded': len(required),
                                                               'fresh': len(self.store) - len(required)})
        return required

    def load_state(self, checkpoint: Checkpoint):
        """Strict load of every parameter; used to restore a finished run"""
        missing = [n for n in self.store.names() if n not in checkpoint.tensors]
        mismatched = {n: (tuple(checkpoint.tensors[n].shape), self.store[n].shape)
                      for n in self.store.names()
                      if n in checkpoint.tensors and checkpoint.tensors[n].shape != self.store[n].shape}
        if missing or mismatched:
            raise PolicyError('Checkpoint does not match the model', missing, mismatched)
        self.store.load_arrays(checkpoint.tensors, self.store.names())

    def to_checkpoint(self, **metadata) -> Checkpoint:
        return Checkpoint.from_store(self.store, **metadata)


def build_model(encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig, seed: int, tasks: Iterable[str],
                num_queries: Optional[int] = None, d_min: float = 1.0, d_max: float = 10.0) -> GlidModel:
    model = GlidModel(encoder_cfg, decoder_cfg, seed)
    for task in tasks:
        model.add_head(task_spec(task, num_queries, d_min, d_max))
    return model
