#!/usr/bin/env python3
# Copyright 2026 The Stratsim Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""Regenerates the JSON fixtures in this directory. Output is deterministic."""

import json
import os

HERE = os.path.dirname(os.path.abspath(__file__))


def write(name, doc):
    with open(os.path.join(HERE, name), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=False)
        f.write("\n")


def tensor(name, dims, kind="activation", dtype_bytes=4, requires_grad=None):
    t = {"name": name, "dims": [{"label": l, "extent": e} for l, e in dims], "kind": kind,
         "dtype_bytes": dtype_bytes}
    if requires_grad is not None:
        t["requires_grad"] = requires_grad
    return t


def op(type_, name, inputs, outputs, cost_key=None, new_dims=None):
    o = {"type": type_, "name": name, "inputs": inputs, "outputs": outputs}
    if cost_key:
        o["cost_key"] = cost_key
    if new_dims:
        o["new_dims"] = new_dims
    return o


def layer(name, tensors, ops, module_path=()):
    return {"name": name, "module_path": list(module_path), "tensors": tensors, "ops": ops}


# ---------------------------------------------------------------------------
# Six-layer chain a..f; d, e, f live under module S1.

def chain_model(batch=32, width=256):
    layers = []
    prev = "x"
    for i, n in enumerate("abcdef"):
        ts = []
        if i == 0:
            ts.append(tensor("x", [("b", batch), ("h0", width)], requires_grad=False))
        ts.append(tensor(f"W{n}", [(f"h{i+1}", width), (f"h{i}", width)], kind="parameter"))
        ts.append(tensor(f"y{n}", [("b", batch), (f"h{i+1}", width)]))
        layers.append(layer(n, ts, [op("linear", f"{n}.fc", [prev, f"W{n}"], [f"y{n}"], "linear")],
                            ["S1"] if n in "def" else []))
        prev = f"y{n}"
    return {"batch_size": batch, "layers": layers}


def dp_map(devs):
    return [[d] for d in devs]


def chain_strategies():
    write("fig3_dp4.json", {"nodes": [
        {"path": "root", "schedule": {"n_micro_batch": 1, "max_ongoing_micro_batch": 1,
                                      "recomputation": False}},
        {"path": "a", "tensors": {"x": {"partition": {"b": 4}, "map": dp_map(range(4))}}},
    ]})
    # Two stages: a, b, c data-parallel on 0-3, S1 data-parallel on 4-7 with
    # recomputation, four micro-batches.
    write("fig3_pipeline.json", {"nodes": [
        {"path": "root", "schedule": {"n_micro_batch": 4, "max_ongoing_micro_batch": 2,
                                      "recomputation": False}},
        {"path": "S1", "schedule": {"n_micro_batch": 4, "max_ongoing_micro_batch": 2,
                                    "recomputation": True}},
        {"path": "a", "tensors": {"x": {"partition": {"b": 4}, "map": dp_map(range(4))}}},
        {"path": "c", "tensors": {"yc": {"partition": {"b": 4}, "map": dp_map(range(4, 8))}}},
    ]})
    # Megatron-style: a column-parallel, b row-parallel, on 4 devices.
    write("fig3_hybrid.json", {"nodes": [
        {"path": "root", "schedule": {"n_micro_batch": 1, "max_ongoing_micro_batch": 1,
                                      "recomputation": False}},
        {"path": "a", "ops": {"a.fc": {"partition": {"b": 2, "h1": 2},
                                       "map": [[0], [1], [2], [3]]}}},
        {"path": "b", "ops": {"b.fc": {"partition": {"b": 2, "h1": 2},
                                       "map": [[0], [1], [2], [3]]}}},
    ]})


# ---------------------------------------------------------------------------
# Two linear layers on one device, for the recomputation comparison.

def two_layer():
    # Activations dominate so recomputation visibly lowers the peak.
    b, h = 512, 64
    model = {"batch_size": b, "layers": [
        layer("l1", [tensor("x", [("b", b), ("h", h)], requires_grad=False),
                     tensor("W1", [("o", h), ("h", h)], kind="parameter"),
                     tensor("y1", [("b", b), ("o", h)])],
              [op("linear", "l1.fc", ["x", "W1"], ["y1"], "linear")]),
        layer("l2", [tensor("W2", [("p", h), ("o", h)], kind="parameter"),
                     tensor("y2", [("b", b), ("p", h)]),
                     tensor("loss", [("b", b)])],
              [op("linear", "l2.fc", ["y1", "W2"], ["y2"], "linear"),
               op("elementwise", "l2.loss", ["y2"], ["loss"], "loss")]),
    ]}
    write("two_layer_model.json", model)
    for rc in (False, True):
        write(f"two_layer_{'recompute' if rc else 'plain'}.json", {"nodes": [
            {"path": "root", "schedule": {"n_micro_batch": 2, "max_ongoing_micro_batch": 2,
                                          "recomputation": rc}},
            {"path": "l1", "tensors": {"x": {"partition": {}, "map": [[0]]}}},
        ]})


# ---------------------------------------------------------------------------
# GPT-2-like decoder stack.

def gpt_model(blocks, batch, seq, hidden, vocab):
    q, f = 3 * hidden, 4 * hidden
    layers = []
    x = "x"
    for i in range(blocks):
        p = f"blk{i}"
        ts = []
        if i == 0:
            ts.append(tensor("x", [("b", batch), ("s", seq), ("h", hidden)], requires_grad=False))
        ts += [
            tensor(f"{p}.Wqkv", [("q", q), ("h", hidden)], kind="parameter"),
            tensor(f"{p}.qkv", [("b", batch), ("s", seq), ("q", q)]),
            tensor(f"{p}.ctx", [("b", batch), ("s", seq), ("q", q)]),
            tensor(f"{p}.Wproj", [("h", hidden), ("q", q)], kind="parameter"),
            tensor(f"{p}.attn", [("b", batch), ("s", seq), ("h", hidden)]),
            tensor(f"{p}.res1", [("b", batch), ("s", seq), ("h", hidden)]),
            tensor(f"{p}.W1", [("f", f), ("h", hidden)], kind="parameter"),
            tensor(f"{p}.fc1", [("b", batch), ("s", seq), ("f", f)]),
            tensor(f"{p}.act", [("b", batch), ("s", seq), ("f", f)]),
            tensor(f"{p}.W2", [("h", hidden), ("f", f)], kind="parameter"),
            tensor(f"{p}.fc2", [("b", batch), ("s", seq), ("h", hidden)]),
            tensor(f"{p}.out", [("b", batch), ("s", seq), ("h", hidden)]),
        ]
        ops = [
            op("linear", f"{p}.qkv_proj", [x, f"{p}.Wqkv"], [f"{p}.qkv"], "linear"),
            op("elementwise", f"{p}.attention", [f"{p}.qkv"], [f"{p}.ctx"], "attention"),
            op("linear", f"{p}.out_proj", [f"{p}.ctx", f"{p}.Wproj"], [f"{p}.attn"], "linear"),
            op("elementwise", f"{p}.add1", [x, f"{p}.attn"], [f"{p}.res1"], "add"),
            op("linear", f"{p}.mlp_in", [f"{p}.res1", f"{p}.W1"], [f"{p}.fc1"], "linear"),
            op("elementwise", f"{p}.gelu", [f"{p}.fc1"], [f"{p}.act"], "gelu"),
            op("linear", f"{p}.mlp_out", [f"{p}.act", f"{p}.W2"], [f"{p}.fc2"], "linear"),
            op("elementwise", f"{p}.add2", [f"{p}.res1", f"{p}.fc2"], [f"{p}.out"], "add"),
        ]
        layers.append(layer(p, ts, ops))
        x = f"{p}.out"
    layers.append(layer("head", [
        tensor("Wvocab", [("v", vocab), ("h", hidden)], kind="parameter"),
        tensor("logits", [("b", batch), ("s", seq), ("v", vocab)]),
        tensor("loss", [("b", batch), ("s", seq), ("v", vocab)]),
    ], [
        op("linear", "head.proj", [x, "Wvocab"], ["logits"], "linear"),
        op("elementwise", "head.loss", ["logits"], ["loss"], "loss"),
    ]))
    return {"batch_size": batch, "layers": layers}


def gpt_strategy(blocks, devices, dp, mp, pp, n_micro, recompute=False, zero=False,
                 max_ongoing=None):
    assert dp * mp * pp == len(devices)
    per_stage = blocks // pp
    stage_devs = [devices[s * dp * mp:(s + 1) * dp * mp] for s in range(pp)]

    def dev(s, i, j):
        return stage_devs[s][i * mp + j]

    def dpmp(s, label):
        part = {"b": dp}
        if mp > 1:
            part[label] = mp
        return {"partition": part,
                "map": [[dev(s, i, j)] for i in range(dp) for j in range(mp)]}

    def activation(s):
        return {"partition": {"b": dp} if dp > 1 else {},
                "map": [[dev(s, i, j) for j in range(mp)] for i in range(dp)]}

    sched = {"n_micro_batch": n_micro, "max_ongoing_micro_batch": max_ongoing or n_micro,
             "recomputation": recompute}
    nodes = [{"path": "root", "schedule": sched}]
    for i in range(blocks):
        s = min(i // per_stage, pp - 1)
        p = f"blk{i}"
        entry = {"path": p,
                 "ops": {f"{p}.qkv_proj": dpmp(s, "q"), f"{p}.mlp_in": dpmp(s, "f")},
                 "tensors": {}}
        if i == 0:
            entry["tensors"]["x"] = activation(0)
        # A stage's input activation is placed with its consumers.
        nxt = i + 1
        if nxt < blocks and nxt % per_stage == 0:
            entry["tensors"][f"{p}.out"] = activation(min(nxt // per_stage, pp - 1))
        if zero:
            n = dp * mp
            assert mp == 1
            for w, label in ((f"{p}.Wqkv", "q"), (f"{p}.Wproj", "h"), (f"{p}.W1", "f"),
                             (f"{p}.W2", "h")):
                for t in (w, w + ".grad", w + ".opt"):
                    entry["tensors"][t] = {"partition": {label: n},
                                           "map": [[d] for d in stage_devs[s]]}
        if not entry["tensors"]:
            del entry["tensors"]
        nodes.append(entry)
    head = {"path": "head", "ops": {"head.proj": dpmp(pp - 1, "v")}}
    if zero:
        n = dp * mp
        head["tensors"] = {t: {"partition": {"v": n}, "map": [[d] for d in stage_devs[-1]]}
                           for t in ("Wvocab", "Wvocab.grad", "Wvocab.opt")}
    nodes.append(head)
    return {"nodes": nodes}


def gpt_fixtures():
    blocks = 8
    write("gpt_model.json", gpt_model(blocks, batch=32, seq=128, hidden=512, vocab=8192))
    devs = list(range(8))
    mixes = [(8, 1, 1, 1), (1, 8, 1, 1), (4, 2, 1, 1), (2, 4, 1, 1), (4, 1, 2, 4),
             (2, 1, 4, 8), (1, 4, 2, 4), (2, 2, 2, 4)]
    for dp, mp, pp, nm in mixes:
        write(f"gpt_dp{dp}_mp{mp}_pp{pp}.json",
              gpt_strategy(blocks, devs, dp, mp, pp, nm))

    # Sized so plain data parallelism overflows 16 GB per device while ZeRO
    # sharding plus recomputation fits.
    big_blocks = 16
    write("gpt_large_model.json",
          gpt_model(big_blocks, batch=64, seq=512, hidden=2048, vocab=8192))
    write("gpt_large_dp8.json", gpt_strategy(big_blocks, devs, 8, 1, 1, 4))
    write("gpt_large_zero_recompute.json",
          gpt_strategy(big_blocks, devs, 8, 1, 1, 4, recompute=True, zero=True))


# ---------------------------------------------------------------------------
# VGG19-shaped convolutional network.

def vgg_model(batch=128):
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M",
           512, 512, 512, 512, "M"]
    layers = []
    size = 224
    chan, clabel = 3, "k0"
    x = "image"
    first = True
    conv_i = pool_i = 0
    for item in cfg:
        ts = []
        if first:
            ts.append(tensor("image", [("b", batch), (clabel, chan), (f"y{size}", size),
                                       (f"x{size}", size)], requires_grad=False))
        if item == "M":
            pool_i += 1
            name = f"pool{pool_i}"
            half = size // 2
            ts.append(tensor(f"{name}.out", [("b", batch), (clabel, chan), (f"y{half}", half),
                                             (f"x{half}", half)]))
            ops = [op("elementwise", f"{name}.max", [x], [f"{name}.out"], "maxpool",
                      new_dims=[f"y{half}", f"x{half}"])]
            size = half
        else:
            conv_i += 1
            name = f"conv{conv_i}"
            out_label = f"k{conv_i}"
            ts += [tensor(f"{name}.W", [(out_label, item), (clabel, chan), ("r", 3), ("t", 3)],
                          kind="parameter"),
                   tensor(f"{name}.out", [("b", batch), (out_label, item), (f"y{size}", size),
                                          (f"x{size}", size)])]
            ops = [op("conv", f"{name}.conv", [x, f"{name}.W"], [f"{name}.out"], "conv3x3")]
            chan, clabel = item, out_label
        layers.append(layer(name, ts, ops))
        x = f"{name}.out"
        first = False
    widths = [("f1", 4096), ("f2", 4096), ("f3", 1000)]
    prev_dims = [(clabel, chan), (f"y{size}", size), (f"x{size}", size)]
    for i, (label, width) in enumerate(widths):
        name = f"fc{i+1}"
        ts = [tensor(f"{name}.W", [(label, width)] + prev_dims, kind="parameter"),
              tensor(f"{name}.out", [("b", batch), (label, width)])]
        layers.append(layer(name, ts, [op("linear", f"{name}.mm", [x, f"{name}.W"],
                                          [f"{name}.out"], "linear")]))
        x = f"{name}.out"
        prev_dims = [(label, width)]
    layers.append(layer("loss", [tensor("loss.out", [("b", batch), ("f3", 1000)])],
                        [op("elementwise", "loss.xent", [x], ["loss.out"], "loss")]))
    return {"batch_size": batch, "layers": layers}


def vgg_fixtures():
    write("vgg19_model.json", vgg_model())
    write("vgg19_dp32.json", {"nodes": [
        {"path": "root", "schedule": {"n_micro_batch": 1, "max_ongoing_micro_batch": 1,
                                      "recomputation": False}},
        {"path": "conv1", "tensors": {"image": {"partition": {"b": 32}, "map": dp_map(range(32))}}},
    ]})


# ---------------------------------------------------------------------------

def clusters():
    write("hc1.json", {
        "name": "HC1", "n_nodes": 1, "devices_per_node": 8, "device_type": "TitanXp",
        "device_memory": 12 * 10**9,
        "intra_node_link": {"class": "pcie", "bandwidth": 12e9, "alpha": 1e-6},
        "inter_socket_link": {"bandwidth": 9.6e9, "alpha": 1e-6},
        "sockets_per_node": 2, "socket_assignment": [0, 0, 0, 0, 1, 1, 1, 1]})
    write("hc2.json", {
        "name": "HC2", "n_nodes": 4, "devices_per_node": 8, "device_type": "V100",
        "device_memory": 32 * 10**9,
        "intra_node_link": {"class": "nvlink", "bandwidth": 150e9, "alpha": 1e-6},
        "nic": {"bandwidth": 12.5e9, "alpha": 5e-6}})
    write("dual_node.json", {
        "name": "2x4 V100", "n_nodes": 2, "devices_per_node": 4, "device_type": "V100",
        "device_memory": 16 * 10**9,
        "intra_node_link": {"class": "nvlink", "bandwidth": 150e9, "alpha": 1e-6},
        "nic": {"bandwidth": 12.5e9, "alpha": 5e-6}})
    write("single_node_16g.json", {
        "name": "8 V100 16GB", "n_nodes": 1, "devices_per_node": 8, "device_type": "V100",
        "device_memory": 16 * 10**9,
        "intra_node_link": {"class": "nvlink", "bandwidth": 150e9, "alpha": 1e-6}})


def costs():
    write("costs.json", [
        {"device_type": "V100", "peak_tflops": 15.0},
        {"device_type": "TitanXp", "peak_tflops": 12.0},
        {"cost_key": "linear", "extents": {"b": 32, "s": 128, "h": 1024, "o": 1024},
         "device_type": "V100", "micros": 850.0},
    ])
    write("corrections.json", {"all-reduce": 0.9, "all-gather": 0.95, "reduce-scatter": 0.95,
                               "all-to-all": 0.8, "broadcast": 1.0, "send-recv": 1.0})


if __name__ == "__main__":
    write("fig3_model.json", chain_model())
    chain_strategies()
    two_layer()
    gpt_fixtures()
    vgg_fixtures()
    clusters()
    costs()
