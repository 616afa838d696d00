#!/usr/bin/env python3
"""Reference oracle for the fusion forward pass.

Generates a JSON fixture holding random inputs and the step-by-step expected
outputs of the image projection, the image-text attention, and the gated
residual fusion. The Rust test suite replays the inputs and compares against
the expected tensors to 1e-12.

All math mirrors the production definitions exactly:
  M      = relu(E W1 + b1) W2 + b2
  P      = M Wg + bg
  S      = H P^T
  alpha  = softmax over each row of S
  H'     = alpha M
  lambda = sigmoid(H' Wl + H Ul)
  H_hat  = layer_norm(H + lambda * H')   (population variance, eps inside
                                          the square root, eps = 1e-5)
"""

import argparse
import json
import pathlib

import numpy as np

LN_EPS = 1e-5


def softmax_rows(s):
    shifted = s - s.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x, scale, shift):
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    return scale * (x - mean) / np.sqrt(var + LN_EPS) + shift


def forward(fix):
    h = np.array(fix["h"])
    e = np.array(fix["features"])
    w1, b1 = np.array(fix["w1"]), np.array(fix["b1"])
    w2, b2 = np.array(fix["w2"]), np.array(fix["b2"])
    w_g, b_g = np.array(fix["w_g"]), np.array(fix["b_g"])
    w_l, u_l = np.array(fix["w_lambda"]), np.array(fix["u_lambda"])
    scale, shift = np.array(fix["ln_scale"]), np.array(fix["ln_shift"])

    m = np.maximum(e @ w1 + b1, 0.0) @ w2 + b2
    p = m @ w_g + b_g
    s = h @ p.T
    alpha = softmax_rows(s)
    h_prime = alpha @ m
    lam = 1.0 / (1.0 + np.exp(-(h_prime @ w_l + h @ u_l)))
    h_hat = layer_norm(h + lam * h_prime, scale, shift)
    return {
        "m_rows": m.tolist(),
        "alpha": alpha.tolist(),
        "h_prime": h_prime.tolist(),
        "lambda": lam.tolist(),
        "h_hat": h_hat.tolist(),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=20260821)
    parser.add_argument("--n", type=int, default=3, help="text positions")
    parser.add_argument("--m", type=int, default=4, help="image rows")
    parser.add_argument("--d", type=int, default=8, help="hidden width")
    parser.add_argument("--d-m", type=int, default=5, help="feature width")
    parser.add_argument(
        "--out",
        type=pathlib.Path,
        default=pathlib.Path(__file__).resolve().parent.parent
        / "crates/uvr-core/tests/data/fusion_fixture.json",
    )
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    n, m, d, d_m = args.n, args.m, args.d, args.d_m

    def u(*shape, lo=-1.0, hi=1.0):
        return rng.uniform(lo, hi, shape).tolist()

    fix = {
        "n": n,
        "m": m,
        "d": d,
        "d_m": d_m,
        "h": u(n, d),
        "features": u(m, d_m),
        "w1": u(d_m, d, lo=-0.1, hi=0.1),
        "b1": u(d, lo=-0.1, hi=0.1),
        "w2": u(d, d, lo=-0.1, hi=0.1),
        "b2": u(d, lo=-0.1, hi=0.1),
        "w_g": u(d, d, lo=-0.1, hi=0.1),
        "b_g": u(d, lo=-0.1, hi=0.1),
        "w_lambda": u(d, d, lo=-0.1, hi=0.1),
        "u_lambda": u(d, d, lo=-0.1, hi=0.1),
        "ln_scale": u(d, lo=0.5, hi=1.5),
        "ln_shift": u(d, lo=-0.5, hi=0.5),
    }
    fix["expected"] = forward(fix)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(fix, indent=1) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
