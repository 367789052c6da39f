"""Multi-modal parameter-estimation network.

Per-modality backbones (CNNs for the three spectrogram inputs, with a
prime-dilated filter after every convolution on the log-frequency branch,
a recurrent encoder for MFCC sequences, per-track MLPs for the statistical
tracks) feed a concatenated global feature vector.  One dense layer
processes it, a second projects it into per-group local features (one
group per operator plus a global group), block-diagonal layers mix within
groups only, and per-parameter MLP heads read their own group's block.
Fixed parameters get no head.

The forward/backward wiring is manual; every layer comes from ``nn`` and
is exercised by finite-difference tests.
"""

from __future__ import annotations

import numpy as np

from . import nn, pdc
from .config import ConfigError, FeatureConfig, ModelConfig
from .synth import ParameterSpace


class PdcLayer(nn.Layer):
    """Depthwise prime-dilated filter along the frequency axis.

    By default one shared trainable tap vector is applied to every channel
    (the minimal reading of "a single filter"); ``channels`` switches to an
    independent tap vector per channel.  Taps are initialized to the
    identity (1 at location 0) plus small noise so a fresh network starts
    near a pass-through.
    """

    def __init__(self, locations: pdc.DilatedLocations, rng, dtype=np.float32,
                 channels: int | None = None):
        super().__init__()
        n = len(locations.locations)
        shape = (channels, n) if channels else (n,)
        v = 0.01 * rng.standard_normal(shape)
        v[..., locations.locations.index(0)] += 1.0
        self._register("v", v.astype(dtype))
        self.locations = locations
        self.channels = channels

    def forward(self, x):  # (N, C, K, T)
        self._x = x
        v = self.params["v"]
        if self.channels is None:
            return pdc.pdc_conv_forward(x, pdc.PdcFilter(self.locations, v))
        out = np.empty_like(x)
        for c in range(self.channels):
            out[:, c] = pdc.pdc_conv_forward(
                x[:, c], pdc.PdcFilter(self.locations, v[c])
            )
        return out

    def backward(self, g):
        v = self.params["v"]
        if self.channels is None:
            gx, gv = pdc.pdc_conv_backward(self._x, pdc.PdcFilter(self.locations, v), g)
            self.grads["v"] += gv
            return gx
        gx = np.empty_like(g)
        for c in range(self.channels):
            gx[:, c], gv = pdc.pdc_conv_backward(
                self._x[:, c], pdc.PdcFilter(self.locations, v[c]), g[:, c]
            )
            self.grads["v"][c] += gv
        return gx


class ConvBackbone:
    """Two strided convolutions, mean-pool over time, linear projection.

    The log-frequency branch keeps stride 1 on the frequency axis so the
    bins-per-octave resolution survives for the dilated filters inserted
    after each convolution.
    """

    def __init__(self, in_shape, out_dim, cfg: ModelConfig, rng, *,
                 freq_stride: int, pdc_locations=None, dtype=np.float32):
        k, t = in_shape
        c1, c2 = cfg.conv_channels
        pdc_ch = (lambda c: c if cfg.pdc_per_channel else None)
        self.conv1 = nn.Conv2d(1, c1, 3, rng, stride=(freq_stride, 2), dtype=dtype)
        self.pdc1 = PdcLayer(pdc_locations, rng, dtype, pdc_ch(c1)) if pdc_locations else None
        self.act1 = nn.make_activation(cfg.activation)
        self.conv2 = nn.Conv2d(c1, c2, 3, rng, stride=(freq_stride, 2), dtype=dtype)
        self.pdc2 = PdcLayer(pdc_locations, rng, dtype, pdc_ch(c2)) if pdc_locations else None
        self.act2 = nn.make_activation(cfg.activation)
        k1, t1 = self.conv1.out_shape(k, t)
        k2, t2 = self.conv2.out_shape(k1, t1)
        self._pooled = (c2, k2)
        self._t2 = t2
        self.proj = nn.Dense(c2 * k2, out_dim, rng, dtype=dtype)

    def modules(self):
        mods = {"conv1": self.conv1, "conv2": self.conv2, "proj": self.proj}
        if self.pdc1:
            mods["pdc1"] = self.pdc1
            mods["pdc2"] = self.pdc2
        return mods

    def forward(self, x):  # (N, 1, K, T)
        h = self.conv1.forward(x)
        if self.pdc1:
            h = self.pdc1.forward(h)
        h = self.act1.forward(h)
        h = self.conv2.forward(h)
        if self.pdc2:
            h = self.pdc2.forward(h)
        h = self.act2.forward(h)
        self._h_shape = h.shape
        pooled = h.mean(axis=3)  # (N, C, K)
        n = x.shape[0]
        return self.proj.forward(pooled.reshape(n, -1))

    def backward(self, g):
        n = g.shape[0]
        gp = self.proj.backward(g).reshape(n, *self._pooled)
        gh = np.broadcast_to(gp[:, :, :, None], self._h_shape) / self._h_shape[3]
        gh = self.act2.backward(np.ascontiguousarray(gh))
        if self.pdc2:
            gh = self.pdc2.backward(gh)
        gh = self.conv2.backward(gh)
        gh = self.act1.backward(gh)
        if self.pdc1:
            gh = self.pdc1.backward(gh)
        return self.conv1.backward(gh)


class SequenceBackbone:
    """Recurrent encoder over (N, T, D) with a linear head."""

    def __init__(self, in_dim, out_dim, cfg: ModelConfig, rng, dtype=np.float32):
        self.cell = nn.RecurrentCell(in_dim, out_dim, rng, dtype=dtype)
        self.proj = nn.Dense(out_dim, out_dim, rng, dtype=dtype)

    def modules(self):
        return {"cell": self.cell, "proj": self.proj}

    def forward(self, x):
        return self.proj.forward(self.cell.forward(x))

    def backward(self, g):
        return self.cell.backward(self.proj.backward(g))


class TrackBackbone:
    """Per-track dense maps from time steps to feature dims, concatenated."""

    def __init__(self, n_tracks, track_len, out_dim, cfg: ModelConfig, rng,
                 dtype=np.float32):
        if out_dim % n_tracks:
            raise ConfigError(
                f"stats output dim {out_dim} must divide by {n_tracks} tracks"
            )
        self.grouped = nn.GroupedDense(n_tracks, track_len, out_dim // n_tracks, rng, dtype)
        self.act = nn.make_activation(cfg.activation)
        self.n_tracks = n_tracks

    def modules(self):
        return {"grouped": self.grouped}

    def forward(self, x):  # (N, n_tracks, T)
        n = x.shape[0]
        h = self.act.forward(self.grouped.forward(x))
        return h.reshape(n, -1)

    def backward(self, g):
        n = g.shape[0]
        gg = self.act.backward(g.reshape(n, self.n_tracks, -1))
        return self.grouped.backward(gg)


class EstimatorModel:
    """The full estimator: backbones -> trunk -> grouped classifier heads."""

    def __init__(self, model_cfg: ModelConfig, feature_cfg: FeatureConfig,
                 space: ParameterSpace, feature_shapes: dict[str, tuple],
                 seed: int = 0, dtype=np.float32):
        self.cfg = model_cfg
        self.feature_cfg = feature_cfg
        self.space = space
        self.dtype = dtype
        self.feature_shapes = dict(feature_shapes)
        rng = np.random.default_rng(seed)

        missing = [m for m in model_cfg.modalities if m not in feature_shapes]
        if missing:
            raise ConfigError(f"no feature shapes for modalities {missing}")

        locations = None
        if model_cfg.pdc_enabled:
            locations = pdc.dilated_locations(
                feature_cfg.cqt_bins_per_octave,
                model_cfg.pdc_primes,
                model_cfg.pdc_symmetric,
            )

        self.backbones: dict[str, object] = {}
        for m in model_cfg.modalities:
            shape = feature_shapes[m]
            out_dim = model_cfg.backbone_dim(m)
            if m in ("stft", "mel"):
                self.backbones[m] = ConvBackbone(
                    shape, out_dim, model_cfg, rng, freq_stride=2, dtype=dtype
                )
            elif m == "cqt":
                self.backbones[m] = ConvBackbone(
                    shape, out_dim, model_cfg, rng,
                    freq_stride=1, pdc_locations=locations, dtype=dtype,
                )
            elif m == "mfcc":
                self.backbones[m] = SequenceBackbone(shape[1], out_dim, model_cfg, rng, dtype)
            elif m == "stats":
                self.backbones[m] = TrackBackbone(shape[0], shape[1], out_dim, model_cfg, rng, dtype)
            elif m == "raw":
                self.backbones[m] = SequenceBackbone(shape[1], out_dim, model_cfg, rng, dtype)
            else:
                raise ConfigError(f"unknown modality {m!r}")

        self.groups = space.groups
        g_count = len(self.groups)
        hidden = model_cfg.group_hidden
        global_dim = model_cfg.global_dim

        self.trunk = nn.Dense(global_dim, global_dim, rng, dtype=dtype)
        self.trunk_act = nn.make_activation(model_cfg.activation)
        self.to_local = nn.Dense(global_dim, g_count * hidden, rng, dtype=dtype)
        self.local_act = nn.make_activation(model_cfg.activation)
        self.masked = []
        self.masked_acts = []
        for _ in range(model_cfg.masked_layers):
            self.masked.append(nn.GroupedDense(g_count, hidden, hidden, rng, dtype))
            self.masked_acts.append(nn.make_activation(model_cfg.activation))

        self.head_names = [d.name for d in space.non_fixed]
        self.head_group_index = {
            d.name: self.groups.index(d.group) for d in space.non_fixed
        }
        self.head_classes = {d.name: d.class_count for d in space.non_fixed}
        self.heads: dict[str, tuple] = {}
        for d in space.non_fixed:
            h1 = nn.Dense(hidden, model_cfg.head_hidden, rng, dtype=dtype)
            act = nn.make_activation(model_cfg.activation)
            h2 = nn.Dense(model_cfg.head_hidden, d.class_count, rng, dtype=dtype)
            self.heads[d.name] = (h1, act, h2)

        self._modules = self._collect_modules()

    # -- parameter registry -------------------------------------------------

    def _collect_modules(self) -> dict[str, nn.Layer]:
        mods: dict[str, nn.Layer] = {}
        for m, bb in self.backbones.items():
            for sub, layer in bb.modules().items():
                mods[f"backbone.{m}.{sub}"] = layer
        mods["trunk"] = self.trunk
        mods["to_local"] = self.to_local
        for i, layer in enumerate(self.masked):
            mods[f"masked.{i}"] = layer
        for name, (h1, _act, h2) in self.heads.items():
            mods[f"head.{name}.0"] = h1
            mods[f"head.{name}.1"] = h2
        return mods

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            f"{mod}/{p}": arr
            for mod, layer in sorted(self._modules.items())
            for p, arr in layer.params.items()
        }

    def gradients(self) -> dict[str, np.ndarray]:
        return {
            f"{mod}/{p}": arr
            for mod, layer in sorted(self._modules.items())
            for p, arr in layer.grads.items()
        }

    def zero_grads(self) -> None:
        for layer in self._modules.values():
            layer.zero_grads()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(values) != set(params):
            raise ValueError("parameter names do not match the model")
        for name, arr in values.items():
            params[name][...] = arr.reshape(params[name].shape)

    # -- forward / backward --------------------------------------------------

    def forward(self, batch: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        feats = []
        self._feat_dims = []
        for m in self.cfg.modalities:
            out = self.backbones[m].forward(batch[m].astype(self.dtype, copy=False))
            feats.append(out)
            self._feat_dims.append(out.shape[1])
        n = feats[0].shape[0]
        global_raw = np.concatenate(feats, axis=1)
        h = self.trunk_act.forward(self.trunk.forward(global_raw))
        local = self.local_act.forward(self.to_local.forward(h))
        local = local.reshape(n, len(self.groups), self.cfg.group_hidden)
        self.local_features = local
        x = local
        for layer, act in zip(self.masked, self.masked_acts):
            x = act.forward(layer.forward(x))
        self._group_out = x
        logits = {}
        for name, (h1, act, h2) in self.heads.items():
            gidx = self.head_group_index[name]
            logits[name] = h2.forward(act.forward(h1.forward(x[:, gidx])))
        return logits

    def backward(self, head_grads: dict[str, np.ndarray]) -> None:
        x = self._group_out
        gx = np.zeros_like(x)
        for name, (h1, act, h2) in self.heads.items():
            if name not in head_grads:
                continue
            gidx = self.head_group_index[name]
            gx[:, gidx] += h1.backward(act.backward(h2.backward(head_grads[name])))
        for layer, act in zip(reversed(self.masked), reversed(self.masked_acts)):
            gx = layer.backward(act.backward(gx))
        self.local_grad = gx
        n = gx.shape[0]
        g = self.local_act.backward(gx.reshape(n, -1))
        g = self.to_local.backward(g)
        g = self.trunk.backward(self.trunk_act.backward(g))
        offset = 0
        for m, dim in zip(self.cfg.modalities, self._feat_dims):
            self.backbones[m].backward(np.ascontiguousarray(g[:, offset : offset + dim]))
            offset += dim
