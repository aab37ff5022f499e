"""Weight-sharing supernet.

One maximal-width, maximal-depth network stores every candidate's weights:
a candidate uses the first C_in/C_out channels of each weight tensor and
the first d layers of each stage. Slicing by default returns numpy views
into the shared store, so candidate gradients scatter straight back into
full-size buffers and a single optimizer step trains the store; extraction
copies the slices out into a standalone model instead.
"""

import numpy as np

from .. import autodiff as ad
from ..errors import TrainingError
from ..models import SegmentationModel
from . import space as sp


class SuperNet:
    def __init__(self, search_space, dtype=np.float32, seed=0):
        self.space = search_space
        self.dtype = np.dtype(dtype)
        maximal = SegmentationModel(sp.model_config_for(search_space, sp.max_arch(search_space)),
                                    dtype=dtype, seed=seed)
        self.store = maximal.state_arrays()
        self.param_names = sorted(maximal.param_arrays())
        # global slot index of stage s, layer j (the maximal model uses one
        # block per slot, stage-major)
        self._slot_base = np.cumsum([0] + [s.max_depth for s in search_space.stages])

    def slot_index(self, stage, layer):
        return int(self._slot_base[stage] + layer)

    def _slice_plan(self, arch):
        """Map candidate parameter names to (store name, slice tuple)."""
        space = self.space
        plan = {}
        block = 0
        c_prev = space.in_channels
        for s, stage in enumerate(space.stages):
            for j, c_out in enumerate(arch.active_channels(s)):
                slot = self.slot_index(s, j)
                cc = c_prev
                for d in range(space.voxel_depth):
                    wname = f"block{slot}.voxel.conv{d}.weight"
                    if space.kind == "pvcnn":
                        conv_slice = (slice(0, c_out), slice(0, cc))
                    else:
                        conv_slice = (slice(None), slice(0, cc), slice(0, c_out))
                    plan[f"block{block}.voxel.conv{d}.weight"] = (wname, conv_slice)
                    if space.use_bn:
                        for part in ("gamma", "beta", "running_mean", "running_var"):
                            plan[f"block{block}.voxel.bn{d}.{part}"] = (
                                f"block{slot}.voxel.bn{d}.{part}", (slice(0, c_out),))
                    cc = c_out
                plan[f"block{block}.point.lin0.weight"] = (
                    f"block{slot}.point.lin0.weight", (slice(0, c_prev), slice(0, c_out)))
                plan[f"block{block}.point.lin0.bias"] = (
                    f"block{slot}.point.lin0.bias", (slice(0, c_out),))
                if space.use_bn:
                    for part in ("gamma", "beta", "running_mean", "running_var"):
                        plan[f"block{block}.point.bn0.{part}"] = (
                            f"block{slot}.point.bn0.{part}", (slice(0, c_out),))
                c_prev = c_out
                block += 1
        for name in self.store:
            if name.startswith("classifier."):
                if name in ("classifier.local.weight", "classifier.global.weight"):
                    plan[name] = (name, (slice(0, c_prev), slice(None)))
                else:
                    plan[name] = (name, (slice(None),))
        return plan

    def slice_weights(self, arch, copy=False):
        """Candidate model over the shared store (views) or a copy of it.

        Returns (model, plan); plan maps each candidate parameter/stat name
        to its (store name, slice) so gradients can be scattered back.
        """
        sp.validate_arch(self.space, arch)
        plan = self._slice_plan(arch)
        weights = {}
        for name, (store_name, slices) in plan.items():
            view = self.store[store_name][slices]
            weights[name] = np.ascontiguousarray(view) if copy else view
        config = sp.model_config_for(self.space, arch)
        model = SegmentationModel(config, dtype=self.dtype, weights=weights)
        return model, plan

    def extract(self, arch):
        """Standalone candidate with copied (inherited) weights."""
        model, _ = self.slice_weights(arch, copy=True)
        return model

    def trainable_store(self):
        return {name: self.store[name] for name in self.param_names}

    def train_step(self, scenes, num_candidates, floors, optimizer, rng,
                   candidate_seeds=None):
        """One shared-store update from `num_candidates` sampled candidates.

        Every candidate runs forward/backward over the scene batch; their
        gradients are averaged into full-size buffers (zero where a
        candidate did not slice) and one optimizer step is taken. Returns
        (arch, loss) per candidate.
        """
        if num_candidates < 1:
            raise TrainingError("need at least one candidate per step")
        grads = {name: np.zeros_like(self.store[name]) for name in self.param_names}
        results = []
        inv_w = 1.0 / num_candidates
        for w in range(num_candidates):
            if candidate_seeds is not None:
                seed = candidate_seeds[w]
            else:
                seed = int(rng.integers(0, 2 ** 63 - 1))
            arch = sp.sample_uniform(self.space, floors, np.random.default_rng(seed))
            model, plan = self.slice_weights(arch)
            with ad.Tape() as tape:
                total = None
                for pc in scenes:
                    logits = model.forward_cloud(pc, training=True)
                    loss = ad.cross_entropy_per_point(logits, pc.labels)
                    total = loss if total is None else ad.add(total, loss)
                total = ad.scale(total, 1.0 / len(scenes))
            if not np.isfinite(total.data):
                raise TrainingError(f"non-finite loss for candidate {arch.to_dict()}")
            tape.backward(total)
            for pname, tensor in model.params.items():
                store_name, slices = plan[pname]
                if tensor.grad is not None:
                    grads[store_name][slices] += tensor.grad * self.dtype.type(inv_w)
            results.append((arch, float(total.data)))
        optimizer.step(self.trainable_store(), grads)
        return results


def slice_weights(supernet, arch, copy=False):
    return supernet.slice_weights(arch, copy=copy)


def supernet_train_step(supernet, scenes, num_candidates, floors, optimizer, rng,
                        candidate_seeds=None):
    return supernet.train_step(scenes, num_candidates, floors, optimizer, rng,
                               candidate_seeds=candidate_seeds)


def recalibrate_bn(model, scenes):
    """Refresh batchnorm running statistics on a calibration split.

    Resets each state, then accumulates the running average of per-scene
    batch statistics (momentum 1/t on the t-th scene). The model should be
    an extracted copy; this mutates its states in place.
    """
    for state in model.bn.values():
        state.running_mean[...] = 0.0
        state.running_var[...] = 1.0
    saved = [(state, state.momentum) for state in model.bn.values()]
    for t, pc in enumerate(scenes, start=1):
        for state in model.bn.values():
            state.momentum = 1.0 / t
        model.forward_cloud(pc, training=True)
    for state, momentum in saved:
        state.momentum = momentum
    return model
