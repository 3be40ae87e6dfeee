"""Scalar test functions for every differentiable op, shared by the gradient tests."""

import numpy as np

from lrstat import autodiff as ad
from lrstat.attention import (
    LossWeights,
    TamParams,
    attention_vector,
    cross_entropy,
    sat_loss,
    spatial_attention,
    tam_forward,
    tat_loss,
    total_loss,
)
from lrstat.backbone import BackboneParams, Model, init_model, model_forward


def _contract(y, r):
    # random linear functional keeps every output coordinate in play
    w = ad.constant(r.normal(size=y.shape))
    return ad.reduce_sum(ad.reshape(ad.mul(y, w), (y.value.size,)), 0)


def _away_from_zero(r, shape, margin=0.05):
    x = r.uniform(margin, 1.0, size=shape) * r.choice([-1.0, 1.0], size=shape)
    return x


def op_cases(r):
    """(name, f, x) triples; inputs keep clear of kinks at 0."""
    a = r.normal(size=(3, 4))
    b = ad.constant(r.normal(size=(3, 4)))
    k = ad.constant(r.normal(size=(2, 2, 3, 3)))
    x4 = ad.constant(r.normal(size=(2, 5, 5)))
    return [
        ("add", lambda x: _contract(ad.add(x, b), r2(1)), a),
        ("sub", lambda x: _contract(ad.sub(b, x), r2(2)), a),
        ("mul", lambda x: _contract(ad.mul(x, b), r2(3)), a),
        ("scale", lambda x: _contract(ad.scale(x, -1.7), r2(4)), a),
        ("absolute", lambda x: _contract(ad.absolute(x), r2(5)), _away_from_zero(r, (3, 4))),
        ("square", lambda x: _contract(ad.square(x), r2(6)), a),
        ("relu", lambda x: _contract(ad.relu(x), r2(7)), _away_from_zero(r, (3, 4))),
        ("sqrt", lambda x: _contract(ad.sqrt(x), r2(8)), r.uniform(0.1, 2.0, size=(3, 4))),
        ("reduce_sum", lambda x: _contract(ad.reduce_sum(x, 1), r2(9)), a),
        ("mean", lambda x: _contract(ad.mean(x, 0), r2(10)), a),
        ("reshape", lambda x: _contract(ad.reshape(x, (2, 6)), r2(11)), a),
        ("broadcast_to", lambda x: _contract(ad.broadcast_to(x, (2, 3, 4)), r2(12)), r.normal(size=(3, 1))),
        ("matmul_left", lambda x: _contract(ad.matmul(x, ad.constant(r2(13).normal(size=(4, 2)))), r2(14)), a),
        ("matmul_right", lambda x: _contract(ad.matmul(ad.constant(r2(15).normal(size=(2, 3))), x), r2(16)), a),
        ("conv2d_input", lambda x: _contract(ad.conv2d(x, k, 1, 1), r2(17)), r.normal(size=(2, 5, 5))),
        ("conv2d_kernel", lambda x: _contract(ad.conv2d(x4, x, 2, 0), r2(18)), r.normal(size=(2, 2, 3, 3))),
        ("conv2d_batched", lambda x: _contract(ad.conv2d(x, k, 1, 1), r2(19)), r.normal(size=(2, 2, 4, 4))),
        ("avgpool2d", lambda x: _contract(ad.avgpool2d(x, 2), r2(20)), r.normal(size=(2, 4, 6))),
        ("softmax", lambda x: _contract(ad.softmax(x, -1), r2(21)), a),
        ("log_softmax", lambda x: _contract(ad.log_softmax(x, 0), r2(22)), a),
        ("l2_normalize", lambda x: _contract(ad.l2_normalize(x, -1), r2(23)), a),
        ("take_along_last", lambda x: _contract(ad.take_along_last(x, [0, 3, 1]), r2(24)), a),
        ("slice_flat", lambda x: _contract(ad.slice_flat(x, 2, 9), r2(25)), a),
    ]


def r2(i):
    return np.random.default_rng(1000 + i)


def attention_cases(r):
    t1 = r.normal(size=(2, 3, 8, 8))
    t2 = r.normal(size=(2, 2, 4, 4))
    k, d = 2, 3
    # positive first layer on positive features: the relu stays alive and away from its kink
    tam = TamParams(
        ad.constant(r.uniform(0, 0.2, size=(k * d, 5))),
        ad.constant(r.uniform(0.5, 1.0, size=5)),
        ad.constant(r.normal(size=(5, k))),
        ad.constant(r.normal(size=k)),
    )
    teacher_state, _ = tam_forward(ad.constant(r.uniform(0.1, 1, size=(k, d))), tam)
    return [
        ("spatial_attention", lambda x: _contract(spatial_attention(x), r2(30)), _away_from_zero(r, (3, 4, 4))),
        ("attention_vector", lambda x: _contract(attention_vector(x), r2(31)), r.uniform(0.1, 1, size=(3, 4))),
        (
            "sat_loss",
            lambda x: sat_loss([x, ad.constant(np.abs(r2(32).normal(size=(2, 2, 4, 4))) + 0.1)], [t1, t2], (0.5, 0.5)),
            _away_from_zero(r, (2, 3, 4, 4)),
        ),
        (
            "sat_loss_l2",
            lambda x: sat_loss([x], [t1], (1.0,), "l2"),
            _away_from_zero(r, (2, 3, 4, 4)),
        ),
        (
            "tam_forward",
            lambda x: _contract(tam_forward(x, tam)[1], r2(33)),
            r.uniform(0.1, 1, size=(k, d)),
        ),
        (
            "tat_loss",
            lambda x: tat_loss(tam_forward(x, tam)[0], teacher_state, (0.5, 0.5)),
            r.uniform(0.1, 1, size=(k, d)),
        ),
        ("cross_entropy", lambda x: ad.mean(cross_entropy(x, [1, 0]), 0), r.normal(size=(2, 4))),
    ]


def tiny_pair(seed=0):
    """Teacher on 8x8 and student on 4x4 frames; 2 blocks, K = 2, B = 2 clips."""
    rng = ad.make_rng([seed])
    teacher = init_model(rng, 3, 2, 3, (2, 3), hidden=4)
    student = init_model(rng, 3, 2, 3, (2, 3), hidden=4)
    hr = rng.uniform(0, 1, size=(2, 2, 8, 8, 3))
    lr = rng.uniform(0, 1, size=(2, 2, 4, 4, 3))
    return teacher, student, hr, lr


def model_from_vector(vec, template):
    """Model whose parameters are slices of one packed vector, in ``template.nodes()`` order."""
    names = sorted(template.nodes())
    nodes, off = {}, 0
    for n in names:
        shape = template.nodes()[n].shape
        size = int(np.prod(shape))
        nodes[n] = ad.slice_flat(vec, off, off + size, shape)
        off += size
    blocks = template.backbone.num_blocks
    bb = BackboneParams(
        [nodes[f"block{i}.kernel"] for i in range(blocks)],
        [nodes[f"block{i}.bias"] for i in range(blocks)],
        nodes["head.w"],
        nodes["head.b"],
    )
    return Model(bb, TamParams(nodes["tam.w1"], nodes["tam.b1"], nodes["tam.w2"], nodes["tam.b2"]))


def end_to_end(student, teacher, hr, lr, labels=(0, 2), w=None):
    """f(packed student parameters) = total loss against the frozen teacher, plus the start point."""
    w = w or LossWeights(0.3, 0.4, 0.3, (0.5, 0.5), (0.5, 0.5))
    with ad.no_grad():
        t_out = model_forward(hr, teacher)
    x0 = np.concatenate([student.nodes()[n].value.ravel() for n in sorted(student.nodes())])

    def f(vec):
        out = model_forward(lr, model_from_vector(vec, student))
        ce = ad.mean(cross_entropy(out.logits, list(labels)), 0)
        sat = sat_loss(out.blocks, [b.value for b in t_out.blocks], w.sat_block_weights)
        tat = tat_loss(out.tam, t_out.tam, w.tat_layer_weights)
        return total_loss(ce, sat, tat, w)

    return f, x0
