"""Momentum SGD with weight decay over the trainable parameters of a graph."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid hyper-parameter or configuration value."""


class SGD:
    """``v <- m*v + g + wd*theta``; ``theta <- theta - lr*v``.

    Only parameters present in the tape are touched, so frozen layers (which
    never get tape entries) keep their exact values.
    """

    def __init__(self, lr, momentum=0.0, weight_decay=0.0):
        self.lr = check_lr(lr)
        if momentum < 0 or weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity: dict = {}

    def step(self, graph, tape, lr=None):
        lr = self.lr if lr is None else check_lr(lr)
        for (node_id, name), grad in tape.grads.items():
            layer = graph.node(node_id).layer
            theta = layer.params[name]
            if grad.shape != theta.shape:
                raise ConfigError(f"gradient for {node_id}.{name} has shape {grad.shape}, parameter {theta.shape}")
            d = grad + self.weight_decay * theta if self.weight_decay else grad
            v = self.velocity.get((node_id, name))
            if v is None or not self.momentum:
                v = d
            else:
                v = self.momentum * v + d
            self.velocity[(node_id, name)] = v
            layer.params[name] = (theta - lr * v).astype(theta.dtype, copy=False)
        return graph


def check_lr(lr):
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    return float(lr)


def sgd_step(graph, tape, lr, momentum=0.0, weight_decay=0.0, state=None):
    """Functional single step; pass the same ``state`` dict across calls to keep momentum."""
    opt = SGD(lr, momentum, weight_decay)
    if state is not None:
        opt.velocity = state
    return opt.step(graph, tape)
