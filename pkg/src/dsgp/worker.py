"""Worker process: owns one data partition, speaks the wire protocol.

Run as ``python3 -m dsgp.worker --index I --mode {frozen,latent} --input-dim Q``.
Frames arrive on stdin; replies go to stdout.  In ``latent`` mode the
SET_DATA inputs block carries ``[means | variances]`` (2q columns); in
``frozen`` mode it carries the fixed inputs themselves (q columns).

Exit codes: 0 on SHUTDOWN, 1 on I/O or protocol failure, 2 on an unknown tag.
"""

import argparse
import sys

import numpy as np

from .bound import local_grads, local_terms
from .engine import LOCAL_STEP_RATE, GlobalParams
from .kernel import LatentPosterior
from .data import dataset_from_bytes
from . import wire


def _parse_args(argv):
    parser = argparse.ArgumentParser(prog="dsgp.worker", description=__doc__)
    parser.add_argument("--index", type=int, required=True)
    parser.add_argument("--mode", choices=("frozen", "latent"), required=True)
    parser.add_argument("--input-dim", type=int, required=True)
    return parser.parse_args(argv)


def serve(stdin, stdout, index, mode, input_dim):
    wire.write_frame(stdout, wire.TAG_HELLO, wire.pack_hello(index))
    q = input_dim
    Y = None
    latents = None
    log_variances = None
    gp = None
    accum = None

    while True:
        tag, payload = wire.read_frame(stdin)
        if tag == wire.TAG_SHUTDOWN:
            return 0
        if tag == wire.TAG_SET_DATA:
            ds = dataset_from_bytes(payload)
            Y = ds.Y
            if mode == "frozen":
                if ds.q != q:
                    raise wire.ProtocolError(
                        f"data block has {ds.q} input columns, expected {q}"
                    )
                latents = LatentPosterior.point_mass(ds.X)
                log_variances = None
            else:
                if ds.q != 2 * q:
                    raise wire.ProtocolError(
                        f"data block has {ds.q} input columns, expected {2 * q}"
                    )
                means = ds.X[:, :q].copy()
                variances = ds.X[:, q:].copy()
                latents = LatentPosterior(means=means, variances=variances)
                log_variances = np.log(variances)
        elif tag == wire.TAG_SET_GLOBALS:
            vec = np.frombuffer(payload, dtype="<f8")
            m, rem = divmod(vec.size - q - 2, q)
            if rem != 0 or m < 1:
                raise wire.ProtocolError(
                    f"globals vector of length {vec.size} does not fit input dim {q}"
                )
            gp = GlobalParams.unflatten(vec, m, q)
            accum = None  # stale against the new parameters
        elif tag == wire.TAG_COMPUTE_TERMS:
            if Y is None or gp is None:
                raise wire.ProtocolError("COMPUTE_TERMS before data and globals")
            parts = local_terms(Y, latents, gp.Z, gp.kernel)
            wire.write_frame(
                stdout, wire.TAG_TERMS_RESULT, wire.pack_terms_result(parts)
            )
        elif tag == wire.TAG_SET_ACCUM:
            if Y is None or gp is None:
                raise wire.ProtocolError("SET_ACCUM before data and globals")
            accum = wire.unpack_accum(
                payload, gp.m, Y.shape[1], gp.kernel.noise_precision
            )
        elif tag == wire.TAG_LOCAL_STEP:
            if mode == "frozen":
                raise wire.ProtocolError("LOCAL_STEP in frozen mode")
            if accum is None:
                raise wire.ProtocolError("LOCAL_STEP before SET_ACCUM")
            count = wire.unpack_local_step(payload)
            mu = latents.means.copy()
            logS = log_variances.copy()
            for _ in range(count):
                cur = LatentPosterior(means=mu, variances=np.exp(logS))
                dmu, dlogS = local_grads(Y, cur, gp.Z, gp.kernel, accum)
                mu = mu + LOCAL_STEP_RATE * dmu
                logS = logS + LOCAL_STEP_RATE * dlogS
            latents = LatentPosterior(means=mu, variances=np.exp(logS))
            log_variances = logS
            wire.write_frame(
                stdout, wire.TAG_LOCAL_RESULT, wire.pack_local_result(mu, logS)
            )
        else:
            print(f"worker {index}: unknown tag {tag:#x}", file=sys.stderr)
            return 2


def main(argv=None):
    args = _parse_args(argv)
    try:
        return serve(
            sys.stdin.buffer, sys.stdout.buffer, args.index, args.mode, args.input_dim
        )
    except wire.ProtocolError as exc:
        print(f"worker {args.index}: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        return 1


if __name__ == "__main__":
    sys.exit(main())
