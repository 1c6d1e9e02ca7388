# Copyright (c) 2026, The SMoRA Authors
# SPDX-License-Identifier: Apache-2.0

import json

from ._core import (
    check_equivalence,
    gate,
    indexed_cols_accumulate,
    indexed_rows_matmul,
    lora_forward,
    max_vio,
    rank_similarity,
    run_equivalence_suite,
    smora_forward,
    smora_forward_dense_oracle,
    softmax,
    top_k_indices,
    update_bias,
)
from ._core import bench_kernels_json as _bench_kernels_json


def bench_kernels(**kwargs):
    return json.loads(_bench_kernels_json(**kwargs))


__all__ = [
    "bench_kernels",
    "check_equivalence",
    "gate",
    "indexed_cols_accumulate",
    "indexed_rows_matmul",
    "lora_forward",
    "max_vio",
    "rank_similarity",
    "run_equivalence_suite",
    "smora_forward",
    "smora_forward_dense_oracle",
    "softmax",
    "top_k_indices",
    "update_bias",
]
