"""Time the numba kernels against their fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is compiled (or cache-loaded) once before timing, so the
numbers are steady-state.  Results are checked for equality first.
"""
import argparse
import time

import numpy as np

from grapetrack import _kernels
from grapetrack.scribble import _markers, morphological_gradient
from grapetrack.synth import SceneConfig, generate_scene
from grapetrack.sfm import observations_by_image


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def pair_key_inputs():
    # hits from a real scene: a long sweep so every point has many frames
    scene = generate_scene(SceneConfig(n_clusters=40, n_frames=120, points_per_cluster=40,
                                       width=640, height=240, seed=1))
    point, frame = [], []
    for image_id, rows in observations_by_image(scene.model).items():
        for pid, _, _ in rows:
            point.append(pid)
            frame.append(image_id - 1)
    point = np.asarray(point, np.int64)
    frame = np.asarray(frame, np.int64)
    order = np.lexsort((frame, point))
    point, frame = point[order], frame[order]
    node = frame.copy()
    ptr = np.r_[np.flatnonzero(np.r_[True, point[1:] != point[:-1]]), point.size]
    return ptr.astype(np.int64), frame, node, -1, int(frame.max()) + 1


def flood_inputs(size):
    lum = np.random.default_rng(0).integers(0, 256, (size, size)).astype(float)
    grad = morphological_gradient(lum)
    return grad, _markers(grad, 4.0)


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    cases = [
        ("pair_keys", _kernels.pair_keys_numba, _kernels.pair_keys_numpy, pair_key_inputs()),
        ("flood 128", _kernels.flood_numba, _kernels.flood_python, flood_inputs(128)),
        ("flood 256", _kernels.flood_numba, _kernels.flood_python, flood_inputs(256)),
    ]
    print(f"{'kernel':<12}{'numba s':>10}{'fallback s':>12}{'speedup':>9}")
    for name, fast, slow, inputs in cases:
        a, b = fast(*inputs), slow(*inputs)
        if name == "pair_keys":
            a, b = np.sort(a), np.sort(b)
        assert np.array_equal(a, b), f"{name}: implementations disagree"
        t_fast = best_of(lambda: fast(*inputs), args.repeat)
        t_slow = best_of(lambda: slow(*inputs), args.repeat)
        print(f"{name:<12}{t_fast:>10.4f}{t_slow:>12.4f}{t_slow / t_fast:>8.1f}x")


if __name__ == "__main__":
    main()
