"""Small dense network with frozen base weights and per-block low-rank adapters.

The network is an l-block chain: frozen input embedding, then l blocks of
``a_j = tanh(a_{j-1} @ (W0_j + scale * N_j @ M_j) + b_j)``, then a frozen
linear head into softmax cross-entropy. Only the adapter factors N (H x r)
and M (r x H) ever train, and only where the allocation map allows.

Backward is analytic and float64. Gradients still flow *through* frozen
blocks so an early trainable block learns even when everything above it is
frozen; what freezing removes is the need to keep that block's input around.
The forward cache mirrors the memory model's split: pre-nonlinearity values
are kept from the earliest trainable block onward (the static analog), block
inputs only for trainable blocks (the dynamic analog).

M starts at zero so the adapters contribute nothing until trained and the
initial network is exactly the frozen base.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from fedlorasim.memory import AllocationMap


class StaleCacheError(ValueError):
    """Backward got a cache produced before the net's parameters changed."""


class NonFiniteLossError(ArithmeticError):
    """Training or scoring hit a NaN/inf loss or gradient."""


#: LoRA parameter state: block index -> (N, M) float64 arrays.
LoraState = dict[int, tuple[np.ndarray, np.ndarray]]


@dataclass
class ForwardCache:
    """Activations retained by one forward pass for a later backward.

    ``preacts`` holds pre-tanh values z_j for blocks from the earliest
    trainable one onward; ``block_inputs`` holds a_{j-1} for trainable j.
    """

    logits: np.ndarray
    preacts: dict[int, np.ndarray]
    block_inputs: dict[int, np.ndarray]
    allocation: AllocationMap
    batch_size: int
    version: int

    @property
    def static_count(self) -> int:
        return len(self.preacts)

    @property
    def dynamic_count(self) -> int:
        return len(self.block_inputs)


def _b64(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype=np.float64)
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unb64(d: dict) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(d["data"]), dtype=np.float64).copy()
    return arr.reshape(d["shape"])


class ToyLoRANet:
    """l-block tanh chain with frozen base and trainable low-rank adapters."""

    def __init__(
        self,
        num_blocks: int = 12,
        hidden_size: int = 16,
        lora_rank: int = 2,
        input_dim: int = 32,
        num_classes: int = 10,
        lora_alpha: float | None = None,
        seed: int = 0,
    ):
        if min(num_blocks, hidden_size, lora_rank, input_dim, num_classes) < 1:
            raise ValueError("all dimensions must be positive")
        self.num_blocks = num_blocks
        self.hidden_size = hidden_size
        self.lora_rank = lora_rank
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.lora_alpha = float(lora_rank if lora_alpha is None else lora_alpha)
        self.scale = self.lora_alpha / lora_rank
        self.version = 0

        rng = np.random.default_rng(seed)
        h = hidden_size
        self.embed = rng.normal(0.0, 1.0 / np.sqrt(input_dim), (input_dim, h))
        self.W0 = [rng.normal(0.0, 1.0 / np.sqrt(h), (h, h)) for _ in range(num_blocks)]
        self.b = [np.zeros(h) for _ in range(num_blocks)]
        self.head = rng.normal(0.0, 1.0 / np.sqrt(h), (h, num_classes))
        self.N = [rng.normal(0.0, 1.0 / np.sqrt(h), (h, lora_rank)) for _ in range(num_blocks)]
        self.M = [np.zeros((lora_rank, h)) for _ in range(num_blocks)]
        for arr in (self.embed, self.head, *self.W0, *self.b):
            arr.setflags(write=False)

    # ---- parameter plumbing -------------------------------------------------

    def get_lora_state(self) -> LoraState:
        return {j: (self.N[j].copy(), self.M[j].copy()) for j in range(self.num_blocks)}

    def set_lora_state(self, state: LoraState) -> None:
        for j, (n, m) in state.items():
            if n.shape != self.N[j].shape or m.shape != self.M[j].shape:
                raise ValueError(f"block {j}: adapter shapes {n.shape}/{m.shape} do not fit")
            self.N[j] = np.array(n, dtype=np.float64)
            self.M[j] = np.array(m, dtype=np.float64)
        self.version += 1

    def clone(self) -> "ToyLoRANet":
        """Independent trainable copy sharing the immutable frozen arrays."""
        other = object.__new__(ToyLoRANet)
        other.__dict__.update(self.__dict__)
        other.N = [n.copy() for n in self.N]
        other.M = [m.copy() for m in self.M]
        other.version = 0
        return other

    def effective_weight(self, j: int) -> np.ndarray:
        return self.W0[j] + self.scale * (self.N[j] @ self.M[j])

    # ---- forward / loss / backward -----------------------------------------

    def forward(self, X: np.ndarray, allocation: AllocationMap) -> tuple[np.ndarray, ForwardCache]:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected features of shape (n, {self.input_dim}), got {X.shape}")
        if len(allocation) != self.num_blocks:
            raise ValueError(
                f"allocation has {len(allocation)} blocks, net has {self.num_blocks}"
            )
        first = allocation.earliest
        trainable = set(allocation.trainable_indices)
        preacts: dict[int, np.ndarray] = {}
        block_inputs: dict[int, np.ndarray] = {}
        a = X @ self.embed
        for j in range(self.num_blocks):
            if j in trainable:
                block_inputs[j] = a
            z = a @ self.effective_weight(j) + self.b[j]
            if first is not None and j >= first:
                preacts[j] = z
            a = np.tanh(z)
        logits = a @ self.head
        return logits, ForwardCache(
            logits=logits,
            preacts=preacts,
            block_inputs=block_inputs,
            allocation=allocation,
            batch_size=X.shape[0],
            version=self.version,
        )

    def loss(self, logits: np.ndarray, y: np.ndarray, loss_scale: float = 1.0) -> float:
        """Mean softmax cross-entropy, optionally scaled by a constant."""
        y = np.asarray(y)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return float(-loss_scale * logp[np.arange(len(y)), y].mean())

    def backward(
        self,
        cache: ForwardCache,
        y: np.ndarray,
        allocation: AllocationMap | None = None,
        loss_scale: float = 1.0,
    ) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """Adapter gradients of the mean cross-entropy for trainable blocks.

        The signal is chained down through frozen blocks and stops at the
        earliest trainable one; blocks below it never matter.
        """
        if allocation is not None and allocation != cache.allocation:
            raise ValueError("allocation does not match the one used in forward")
        if cache.version != self.version:
            raise StaleCacheError("net parameters changed since this cache was made")
        allocation = cache.allocation
        first = allocation.earliest
        if first is None:
            return {}
        y = np.asarray(y)
        if len(y) != cache.batch_size:
            raise ValueError("labels do not match the cached batch")
        logits = cache.logits
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        probs = expd / expd.sum(axis=1, keepdims=True)
        dlogits = probs.copy()
        dlogits[np.arange(len(y)), y] -= 1.0
        dlogits *= loss_scale / cache.batch_size

        grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        da = dlogits @ self.head.T
        trainable = set(allocation.trainable_indices)
        for j in range(self.num_blocks - 1, first - 1, -1):
            z = cache.preacts[j]
            dz = da * (1.0 - np.tanh(z) ** 2)
            if j in trainable:
                a_in = cache.block_inputs[j]
                dW = a_in.T @ dz
                grads[j] = (self.scale * (dW @ self.M[j].T), self.scale * (self.N[j].T @ dW))
            if j > first:
                da = dz @ self.effective_weight(j).T
        return grads

    def evaluate(self, X: np.ndarray, y: np.ndarray) -> tuple[float, float]:
        """(mean cross-entropy, accuracy) with nothing trainable, no caching."""
        logits, _ = self.forward(X, AllocationMap.empty(self.num_blocks))
        loss = self.loss(logits, np.asarray(y))
        acc = float((logits.argmax(axis=1) == np.asarray(y)).mean())
        return loss, acc

    # ---- snapshots -----------------------------------------------------------

    def to_snapshot(self) -> dict:
        return {
            "num_blocks": self.num_blocks,
            "hidden_size": self.hidden_size,
            "lora_rank": self.lora_rank,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "lora_alpha": self.lora_alpha,
            "embed": _b64(self.embed),
            "head": _b64(self.head),
            "W0": [_b64(w) for w in self.W0],
            "b": [_b64(v) for v in self.b],
            "N": [_b64(n) for n in self.N],
            "M": [_b64(m) for m in self.M],
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "ToyLoRANet":
        net = cls(
            num_blocks=snap["num_blocks"],
            hidden_size=snap["hidden_size"],
            lora_rank=snap["lora_rank"],
            input_dim=snap["input_dim"],
            num_classes=snap["num_classes"],
            lora_alpha=snap["lora_alpha"],
            seed=0,
        )
        net.embed = _unb64(snap["embed"])
        net.head = _unb64(snap["head"])
        net.W0 = [_unb64(w) for w in snap["W0"]]
        net.b = [_unb64(v) for v in snap["b"]]
        net.N = [_unb64(n) for n in snap["N"]]
        net.M = [_unb64(m) for m in snap["M"]]
        for arr in (net.embed, net.head, *net.W0, *net.b):
            arr.setflags(write=False)
        net.version = 0
        return net


def forward(net: ToyLoRANet, X, allocation: AllocationMap):
    return net.forward(X, allocation)


def backward(net: ToyLoRANet, cache: ForwardCache, y, allocation: AllocationMap | None = None):
    return net.backward(cache, y, allocation)


def local_train(
    net: ToyLoRANet,
    X: np.ndarray,
    y: np.ndarray,
    allocation: AllocationMap,
    epochs: int = 1,
    batch_size: int = 32,
    lr: float = 0.1,
    rng: np.random.Generator | None = None,
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Plain SGD over the local data; returns adapter deltas per trained block.

    Mutates ``net`` in place. Deltas are theta_after - theta_before and exist
    exactly for the allocation's trainable blocks (all-zero when lr is 0).
    Batches are sequential unless an rng is given to shuffle each epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(X) == 0:
        raise ValueError("local dataset is empty")
    if len(X) != len(y):
        raise ValueError("features and labels disagree in length")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be positive")
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")

    before = {j: (net.N[j].copy(), net.M[j].copy()) for j in allocation.trainable_indices}
    n = len(X)
    for epoch in range(epochs):
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            logits, cache = net.forward(X[idx], allocation)
            loss = net.loss(logits, y[idx])
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss {loss} at epoch {epoch}, batch start {start}, lr {lr}"
                )
            grads = net.backward(cache, y[idx])
            for j, (gn, gm) in grads.items():
                net.N[j] = net.N[j] - lr * gn
                net.M[j] = net.M[j] - lr * gm
            net.version += 1
    return {
        j: (net.N[j] - before[j][0], net.M[j] - before[j][1])
        for j in allocation.trainable_indices
    }
