"""Reference computations shared by the unit and acceptance tests."""

import dataclasses

import numpy as np

from hybridgcn.engine import init_params, loss_and_grads, prepare


def rel(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-300)


def labelled(g, seed=0, feat_dim=4, classes=3, train_frac=0.7):
    rng = np.random.default_rng(seed)
    n = g.num_nodes
    train_mask = rng.random(n) < train_frac
    return dataclasses.replace(
        g, features=rng.standard_normal((n, feat_dim)).astype(np.float32),
        labels=np.arange(n) % classes, train_mask=train_mask, val_mask=~train_mask,
        test_mask=~train_mask)


def fd_check(graph, cfg, epoch=1, h=1e-5) -> float:
    """Assert every gradient tensor matches central differences; return the worst error."""
    setup = prepare(graph, cfg)
    params = init_params(cfg, graph.feat_dim, graph.num_classes)
    for k in params:  # move off the exact init values so norm gains/shifts matter
        params[k] = params[k] + np.random.default_rng(len(k)).uniform(-0.3, 0.3, params[k].shape)
    _, grads = loss_and_grads(graph, params, cfg, setup, epoch)
    worst = 0.0
    for name, val in params.items():
        fd = np.zeros_like(val)
        for idx in np.ndindex(val.shape):
            old = val[idx]
            val[idx] = old + h
            lp = loss_and_grads(graph, params, cfg, setup, epoch)[0]
            val[idx] = old - h
            lm = loss_and_grads(graph, params, cfg, setup, epoch)[0]
            val[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        err = np.abs(grads[name] - fd).max() / max(np.abs(fd).max(), 1e-8)
        assert err < 1e-4, (name, err)
        worst = max(worst, err)
    return worst
