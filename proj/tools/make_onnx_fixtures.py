#!/usr/bin/env python3
"""Generate the ONNX test fixtures under tests/fixtures/.

Each model gets seeded random weights. For models with a pooling stage the
activation that feeds the pooling node is captured with onnxruntime on a
synthetic reference input and written next to the model as raw little-endian
float32, in channel-major (K, h, w) order.

The reference input is a closed-form pattern reproduced by the C++ tests:

    v(y, x, c) = sin(0.05 * x + 0.031 * y * (c + 1) + c)      (HWC order)

Usage:
    python3 tools/make_onnx_fixtures.py [--out tests/fixtures] [--width 0.25]
    python3 tools/make_onnx_fixtures.py --full-mobilenet /tmp/mobilenet_v1_1.0.onnx
"""

import argparse
import pathlib

import numpy as np
import onnx
import onnxruntime as ort
from onnx import TensorProto, helper, numpy_helper

SIDE = 224


def reference_input():
    y, x, c = np.meshgrid(np.arange(SIDE), np.arange(SIDE), np.arange(3), indexing="ij")
    return np.sin(0.05 * x + 0.031 * y * (c + 1) + c).astype(np.float32)


class GraphBuilder:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.nodes = []
        self.inits = []
        self.count = 0

    def name(self, prefix):
        self.count += 1
        return f"{prefix}_{self.count}"

    def const(self, array, prefix="w"):
        n = self.name(prefix)
        self.inits.append(numpy_helper.from_array(array, n))
        return n

    def node(self, op, inputs, prefix=None, **attrs):
        out = self.name(prefix or op.lower())
        self.nodes.append(helper.make_node(op, inputs, [out], name=out, **attrs))
        return out

    def conv(self, x, cin, cout, k, stride, group=1, bias=False, pads=None):
        fan_in = (cin // group) * k * k
        w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin // group, k, k)).astype(np.float32)
        inputs = [x, self.const(w)]
        if bias:
            inputs.append(self.const(self.rng.normal(0.0, 0.1, cout).astype(np.float32), "b"))
        p = k // 2 if pads is None else pads
        return self.node("Conv", inputs, kernel_shape=[k, k], strides=[stride, stride],
                         pads=[p, p, p, p], group=group)

    def batchnorm(self, x, ch):
        scale = self.rng.uniform(0.5, 1.5, ch).astype(np.float32)
        shift = self.rng.normal(0.0, 0.1, ch).astype(np.float32)
        mean = self.rng.normal(0.0, 0.2, ch).astype(np.float32)
        var = self.rng.uniform(0.5, 2.0, ch).astype(np.float32)
        return self.node("BatchNormalization",
                         [x, self.const(scale, "bn_s"), self.const(shift, "bn_b"),
                          self.const(mean, "bn_m"), self.const(var, "bn_v")], epsilon=1e-3)

    def relu6(self, x, opset):
        if opset >= 11:
            return self.node("Clip", [x, self.const(np.array(0.0, np.float32), "lo"),
                                      self.const(np.array(6.0, np.float32), "hi")])
        return self.node("Clip", [x], min=0.0, max=6.0)


def mobilenet_v1(width, seed, classes=10, opset=13):
    """MobileNet v1 topology: 13 depthwise-separable blocks, BN + ReLU6."""
    g = GraphBuilder(seed)
    ch = lambda c: max(8, int(c * width))
    x = "image"
    x = g.relu6(g.batchnorm(g.conv(x, 3, ch(32), 3, 2), ch(32)), opset)
    cin = ch(32)
    blocks = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
              (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1)]
    for cout, stride in blocks:
        cout = ch(cout)
        x = g.relu6(g.batchnorm(g.conv(x, cin, cin, 3, stride, group=cin), cin), opset)
        x = g.relu6(g.batchnorm(g.conv(x, cin, cout, 1, 1, pads=0), cout), opset)
        cin = cout
    tapped = x
    x = g.node("GlobalAveragePool", [x])
    x = g.node("Flatten", [x], axis=1)
    fc = g.rng.normal(0.0, 0.05, (classes, cin)).astype(np.float32)
    x = g.node("Gemm", [x, g.const(fc), g.const(np.zeros(classes, np.float32), "b")], transB=1)
    x = g.node("Softmax", [x], axis=1)
    graph = helper.make_graph(
        g.nodes, "mobilenet_v1",
        [helper.make_tensor_value_info("image", TensorProto.FLOAT, ["N", 3, SIDE, SIDE])],
        [helper.make_tensor_value_info(x, TensorProto.FLOAT, ["N", classes])], g.inits)
    return graph, tapped, "nchw", opset


def tiny_nhwc(seed):
    """NHWC input, transposes to NCHW internally, pools with ReduceMean over H,W."""
    g = GraphBuilder(seed)
    x = g.node("Transpose", ["image"], perm=[0, 3, 1, 2])
    x = g.node("Relu", [g.conv(x, 3, 8, 3, 2, bias=True)])
    x = g.node("MaxPool", [x], kernel_shape=[2, 2], strides=[2, 2])
    x = g.conv(x, 8, 12, 4, 4, pads=0)
    shift = g.rng.normal(0.0, 0.5, (12, 1, 1)).astype(np.float32)
    x = g.node("Relu", [g.node("Add", [x, g.const(shift, "shift")])])
    x = g.node("Transpose", [x], perm=[0, 2, 3, 1])
    tapped = x
    x = g.node("ReduceMean", [x], axes=[1, 2], keepdims=0)
    head = g.rng.normal(0.0, 0.1, (12, 4)).astype(np.float32)
    x = g.node("MatMul", [x, g.const(head)])
    graph = helper.make_graph(
        g.nodes, "tiny_nhwc",
        [helper.make_tensor_value_info("image", TensorProto.FLOAT, [1, SIDE, SIDE, 3])],
        [helper.make_tensor_value_info(x, TensorProto.FLOAT, [1, 4])], g.inits)
    return graph, tapped, "nhwc", 13


def tiny_avgpool_opset10(seed):
    """Opset-10 attribute forms (Pad, Clip), elementwise ops, AveragePool as global pool."""
    g = GraphBuilder(seed)
    x = g.node("Pad", ["image"], mode="constant", pads=[0, 0, 1, 1, 0, 0, 1, 1], value=0.0)
    x = g.conv(x, 3, 6, 3, 4, bias=True, pads=0)  # 226 -> 56
    scale = g.rng.uniform(0.5, 1.5, (1, 6, 1, 1)).astype(np.float32)
    x = g.node("Mul", [x, g.const(scale, "scale")])
    x = g.node("Sub", [x, g.const(np.array(0.1, np.float32), "offset")])
    x = g.relu6(x, 10)
    x = g.relu6(g.conv(x, 6, 6, 3, 2, group=6), 10)  # 28
    x = g.relu6(g.conv(x, 6, 10, 1, 1, pads=0), 10)
    x = g.node("AveragePool", [x], kernel_shape=[2, 2], strides=[2, 2])  # 14, not global
    x = g.node("Identity", [x])
    tapped = x
    x = g.node("AveragePool", [x], kernel_shape=[14, 14])
    x = g.node("Flatten", [x], axis=1)
    graph = helper.make_graph(
        g.nodes, "tiny_avgpool",
        [helper.make_tensor_value_info("image", TensorProto.FLOAT, [1, 3, SIDE, SIDE])],
        [helper.make_tensor_value_info(x, TensorProto.FLOAT, [1, 10])], g.inits)
    return graph, tapped, "nchw", 10


def no_pool(seed):
    """Conv then dense layer with no spatial pooling stage: unsupported for CAM."""
    g = GraphBuilder(seed)
    x = g.conv("image", 3, 4, 8, 8, pads=0)  # 28x28
    x = g.node("Flatten", [x], axis=1)
    fc = g.rng.normal(0.0, 0.01, (4 * 28 * 28, 3)).astype(np.float32)
    x = g.node("MatMul", [x, g.const(fc)])
    graph = helper.make_graph(
        g.nodes, "no_pool",
        [helper.make_tensor_value_info("image", TensorProto.FLOAT, [1, 3, SIDE, SIDE])],
        [helper.make_tensor_value_info(x, TensorProto.FLOAT, [1, 3])], g.inits)
    return graph, None, "nchw", 13


def save(graph, opset, path):
    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", opset)],
                              producer_name="salient_teach-fixtures", ir_version=8)
    onnx.checker.check_model(model)
    onnx.save(model, str(path))
    return model


def reference_activation(model, tapped, layout):
    probe = onnx.ModelProto()
    probe.CopyFrom(model)
    probe.graph.output.append(helper.make_tensor_value_info(tapped, TensorProto.FLOAT, None))
    sess = ort.InferenceSession(probe.SerializeToString(), providers=["CPUExecutionProvider"])
    image = reference_input()
    feed = image[None] if layout == "nhwc" else image.transpose(2, 0, 1)[None]
    act = sess.run([tapped], {sess.get_inputs()[0].name: feed})[0][0]
    if act.ndim == 3 and layout == "nhwc":
        act = act.transpose(2, 0, 1)
    return np.ascontiguousarray(act, dtype="<f4")


def emit(name, built, out):
    graph, tapped, layout, opset = built
    model = save(graph, opset, out / f"{name}.onnx")
    if tapped is not None:
        act = reference_activation(model, tapped, layout)
        act.tofile(out / f"{name}.maps.f32")
        print(f"{name}: tapped {tapped} shape (K,h,w)={act.shape}")
    else:
        print(f"{name}: no pooling stage")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parents[1] / "tests" / "fixtures"))
    ap.add_argument("--width", type=float, default=0.25)
    ap.add_argument("--full-mobilenet", help="also write a width-1.0 MobileNet v1 (random weights) here")
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit("mobilenet_v1_025", mobilenet_v1(args.width, seed=7), out)
    emit("tiny_nhwc", tiny_nhwc(seed=11), out)
    emit("tiny_avgpool", tiny_avgpool_opset10(seed=13), out)
    emit("no_pool", no_pool(seed=17), out)
    if args.full_mobilenet:
        path = pathlib.Path(args.full_mobilenet)
        emit(path.stem, mobilenet_v1(1.0, seed=7), path.parent)


if __name__ == "__main__":
    main()
