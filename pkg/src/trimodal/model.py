"""The full classifier: patch embedders + shared trunk + per-dataset heads."""

import numpy as np

from .heads import HeadSet
from .patch_embed import RGBD, PatchEmbedder, PatchSpec
from .tensor import unstack
from .trunk import Trunk, TrunkConfig

_INIT_STREAM = 0xA11CE


class MultiModalModel:
    """One shared trunk classifying all modalities, one head per dataset.

    head_specs: {dataset_id: (n_classes, pre_head_dropout)}. Construction
    is deterministic given the seed: parameters are drawn from a single
    generator in a fixed order.
    """

    def __init__(self, patch_spec, trunk_config, head_specs, seed=0,
                 dtype=np.float32, rgbd_mode="additive"):
        if trunk_config.stage_dims[0] != patch_spec.d:
            raise ValueError(f"patch embedding dim {patch_spec.d} must equal "
                             f"first stage dim {trunk_config.stage_dims[0]}")
        self.patch_spec = patch_spec
        self.trunk_config = trunk_config
        self.dtype = dtype
        self.seed = seed
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, _INIT_STREAM])))
        self.embedder = PatchEmbedder(patch_spec, rng, dtype=dtype, rgbd_mode=rgbd_mode)
        self.trunk = Trunk(trunk_config, rng, dtype=dtype)
        self.heads = HeadSet(trunk_config.final_dim, rng, dtype=dtype)
        for dataset_id in sorted(head_specs):
            n_classes, drop = head_specs[dataset_id]
            self.heads.add_head(dataset_id, n_classes, dropout_rate=drop)

    def parameters(self):
        return (self.embedder.parameters() + self.trunk.parameters()
                + self.heads.parameters())

    def param_dict(self):
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def load_param_arrays(self, arrays):
        """Overwrite parameter values from a {name: ndarray} mapping."""
        params = self.param_dict()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise KeyError(f"parameter name mismatch: missing={sorted(missing)} "
                           f"extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(arrays[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.copy()

    # -- forward paths ------------------------------------------------------

    def forward_group(self, samples, train=False, rng=None):
        """Same-modality, same-shape samples -> (phi [B, D], stage grids)."""
        grid = self.embedder.embed_batch(samples)
        return self.trunk.forward(grid.tokens, train=train, rng=rng)

    def phi_rows(self, samples, train=False, rng=None):
        """Per-sample representation rows, grouped internally by shape.

        Returns a list of Tensors of shape [final_dim] aligned with the
        input order; all rows stay on their autodiff graphs.
        """
        groups = {}
        for pos, s in enumerate(samples):
            groups.setdefault((s.modality, s.tensor.shape), []).append(pos)
        rows = [None] * len(samples)
        for key in sorted(groups, key=str):
            positions = groups[key]
            phi, _ = self.forward_group([samples[p] for p in positions],
                                        train=train, rng=rng)
            for p, row in zip(positions, unstack(phi, axis=0)):
                rows[p] = row
        return rows

    def logits_for(self, samples, dataset_id, train=False, rng=None):
        """Logits [B, C] for same-shape samples of one dataset."""
        phi, _ = self.forward_group(samples, train=train, rng=rng)
        return self.heads.forward(phi, dataset_id, train=train, rng=rng)

    def predict(self, samples, dataset_id):
        """Eval-mode argmax labels, grouped by shape internally."""
        out = np.empty(len(samples), dtype=np.int64)
        groups = {}
        for pos, s in enumerate(samples):
            groups.setdefault(s.tensor.shape, []).append(pos)
        for shape in sorted(groups):
            positions = groups[shape]
            logits = self.logits_for([samples[p] for p in positions], dataset_id)
            out[positions] = logits.data.argmax(axis=1)
        return out

    def accuracy(self, samples, dataset_id):
        preds = self.predict(samples, dataset_id)
        labels = np.array([s.label for s in samples])
        return float((preds == labels).mean())
