"""Message-passing depth vs trainability on one scenario.

Trains the same model from the same init on one scenario with the iteration
cap at 40 and at 8, and prints loss, MAPE, gradient norm, the number of
iterations actually run and the spread of the final flow states.

On the default scenario (seed 101, 6 devices) the 40-iteration run settles
on a fixed queue length for every flow: the loss freezes and the gradient
vanishes, while the 8-iteration run fits it. Other scenarios (e.g. seed 1,
8 devices) train at both depths, so this is a failure mode of the deep
unroll, not a rule.
"""

import argparse

import numpy as np

from tracegnn import autodiff as ad
from tracegnn.experiments import RUN_MODEL
from tracegnn.model import compile_scenario, forward
from tracegnn.nn import OptState, adam_step, init_params
from tracegnn.simulator import GeneratorConfig, generate_scenario
from tracegnn.traces import fit_normalization
from tracegnn.training import log_mse_loss, mape


def run(graph, t_max, steps, lr, seed):
    params, opt = init_params(seed, RUN_MODEL), OptState(lr=lr)
    y = graph.labels
    const = float(np.mean((np.log(y) - np.mean(np.log(y))) ** 2))
    for step in range(steps + 1):
        vars_ = params.as_vars()
        out = forward(graph, vars_, t_max=t_max)
        loss = log_mse_loss(out.delay, y)
        ad.backward(loss)
        grads = {k: v.grad if v.grad is not None else np.zeros_like(v.value) for k, v in vars_.items()}
        if step % max(1, steps // 10) == 0:
            gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            print(f"T_max={t_max:2d} step {step:4d}  loss {float(loss.value):.4f} (var ln y {const:.4f})  "
                  f"MAPE {mape(out.delay.value[:, 0], y):6.2f}%  |grad| {gnorm:.2e}  "
                  f"iterations {out.iterations:2d}  flow-state std {out.state.h_f.value.std():.3f}")
        adam_step(params, grads, opt)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--devices", type=int, default=6)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scenario-seed", type=int, default=101)
    args = ap.parse_args()
    sc = generate_scenario(args.scenario_seed, args.devices, False, GeneratorConfig())
    graph = compile_scenario(sc, fit_normalization([sc]))
    print(f"{len(sc.flows)} flows, {len(sc.linkports)} linkports")
    for t_max in (40, 8):
        run(graph, t_max, args.steps, args.lr, args.seed)


if __name__ == "__main__":
    main()
