"""Dirichlet contraction suite plus the tiny full-pipeline gradient check."""

import json

from dynakf.cli import stability_suite, tiny_grad_check
from dynakf.diffmath import RngStream
from dynakf.transition import TransitionHead

for layout, d in (("diagonal", 16), ("full", 8)):
    head = TransitionHead.init(d, RngStream(0, (1, 1)), "dirichlet", layout)
    print(layout, json.dumps(stability_suite(head, 10_000, 200, seed=0)))
for mode, rep in tiny_grad_check(0).items():
    print(mode)
    print(rep.summary())
