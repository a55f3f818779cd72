#include "onnx_model.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <set>

#include "proto/onnx.pb.h"
#include "salient_teach/errors.hpp"

namespace salient_teach::onnx_exec {

static_assert(std::endian::native == std::endian::little, "raw tensor data is read as little-endian");

std::size_t Tensor::numel() const {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

namespace {

using Shape = std::vector<std::int64_t>;

[[noreturn]] void fail(const Node& node, const std::string& what) {
  throw UnsupportedModel(node.op + " node '" + node.name + "': " + what);
}

TensorPtr make_float(Shape shape, std::vector<float> data) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->data = std::move(data);
  return t;
}

TensorPtr make_ints(Shape shape, std::vector<std::int64_t> ints) {
  auto t = std::make_shared<Tensor>();
  t->shape = std::move(shape);
  t->ints = std::move(ints);
  t->integral = true;
  return t;
}

// ---------------------------------------------------------------------------
// Protobuf conversion

TensorPtr convert_tensor(const ::onnx::TensorProto& proto, const std::string& origin) {
  if (proto.data_location() == ::onnx::TensorProto::EXTERNAL) {
    throw LoadError(origin, "tensor '" + proto.name() + "' uses external data, which is not supported");
  }
  Shape shape(proto.dims().begin(), proto.dims().end());
  std::size_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw LoadError(origin, "tensor '" + proto.name() + "' has a negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  const std::string& raw = proto.raw_data();
  auto from_raw = [&]<typename T>(T*) {
    if (raw.size() != n * sizeof(T)) {
      throw LoadError(origin, "tensor '" + proto.name() + "' raw data has the wrong length");
    }
    std::vector<T> v(n);
    if (n) std::memcpy(v.data(), raw.data(), raw.size());
    return v;
  };
  auto check_len = [&](std::size_t got) {
    if (got != n) throw LoadError(origin, "tensor '" + proto.name() + "' has the wrong element count");
  };
  switch (proto.data_type()) {
    case ::onnx::TensorProto::FLOAT: {
      if (proto.has_raw_data()) return make_float(shape, from_raw(static_cast<float*>(nullptr)));
      check_len(static_cast<std::size_t>(proto.float_data_size()));
      return make_float(shape, {proto.float_data().begin(), proto.float_data().end()});
    }
    case ::onnx::TensorProto::DOUBLE: {
      std::vector<double> d = proto.has_raw_data() ? from_raw(static_cast<double*>(nullptr))
                                                   : std::vector<double>(proto.double_data().begin(), proto.double_data().end());
      check_len(d.size());
      return make_float(shape, std::vector<float>(d.begin(), d.end()));
    }
    case ::onnx::TensorProto::INT64: {
      if (proto.has_raw_data()) return make_ints(shape, from_raw(static_cast<std::int64_t*>(nullptr)));
      check_len(static_cast<std::size_t>(proto.int64_data_size()));
      return make_ints(shape, {proto.int64_data().begin(), proto.int64_data().end()});
    }
    case ::onnx::TensorProto::INT32: {
      std::vector<std::int32_t> d = proto.has_raw_data()
                                        ? from_raw(static_cast<std::int32_t*>(nullptr))
                                        : std::vector<std::int32_t>(proto.int32_data().begin(), proto.int32_data().end());
      check_len(d.size());
      return make_ints(shape, std::vector<std::int64_t>(d.begin(), d.end()));
    }
    default:
      throw UnsupportedModel("tensor '" + proto.name() + "' has unsupported element type " +
                             std::to_string(proto.data_type()));
  }
}

Attribute convert_attribute(const ::onnx::AttributeProto& proto, const std::string& origin) {
  Attribute a;
  switch (proto.type()) {
    case ::onnx::AttributeProto::INT: a.kind = Attribute::Kind::i; a.i = proto.i(); break;
    case ::onnx::AttributeProto::FLOAT: a.kind = Attribute::Kind::f; a.f = proto.f(); break;
    case ::onnx::AttributeProto::STRING: a.kind = Attribute::Kind::s; a.s = proto.s(); break;
    case ::onnx::AttributeProto::INTS:
      a.kind = Attribute::Kind::ints;
      a.ints.assign(proto.ints().begin(), proto.ints().end());
      break;
    case ::onnx::AttributeProto::FLOATS:
      a.kind = Attribute::Kind::floats;
      a.floats.assign(proto.floats().begin(), proto.floats().end());
      break;
    case ::onnx::AttributeProto::TENSOR:
      a.kind = Attribute::Kind::tensor;
      a.tensor = convert_tensor(proto.t(), origin);
      break;
    default:
      break;  // graphs, sparse tensors etc. are irrelevant to supported ops
  }
  return a;
}

// ---------------------------------------------------------------------------
// Attribute and input access

const Attribute* find_attr(const Node& n, std::string_view key) {
  auto it = n.attrs.find(key);
  return it == n.attrs.end() ? nullptr : &it->second;
}

std::int64_t attr_int(const Node& n, std::string_view key, std::int64_t fallback) {
  const auto* a = find_attr(n, key);
  return a && a->kind == Attribute::Kind::i ? a->i : fallback;
}

float attr_float(const Node& n, std::string_view key, float fallback) {
  const auto* a = find_attr(n, key);
  return a && a->kind == Attribute::Kind::f ? a->f : fallback;
}

std::string attr_string(const Node& n, std::string_view key, std::string fallback) {
  const auto* a = find_attr(n, key);
  return a && a->kind == Attribute::Kind::s ? a->s : fallback;
}

std::vector<std::int64_t> attr_ints(const Node& n, std::string_view key, std::vector<std::int64_t> fallback = {}) {
  const auto* a = find_attr(n, key);
  return a && a->kind == Attribute::Kind::ints ? a->ints : fallback;
}

const Tensor* optional_input(const Node& n, const Env& env, std::size_t i) {
  if (i >= n.inputs.size() || n.inputs[i].empty()) return nullptr;
  auto it = env.find(n.inputs[i]);
  if (it == env.end()) fail(n, "input '" + n.inputs[i] + "' is not available");
  return it->second.get();
}

const Tensor& input(const Node& n, const Env& env, std::size_t i) {
  const Tensor* t = optional_input(n, env, i);
  if (!t) fail(n, "missing input " + std::to_string(i));
  return *t;
}

const Tensor& float_input(const Node& n, const Env& env, std::size_t i) {
  const Tensor& t = input(n, env, i);
  if (t.integral) fail(n, "expected a float tensor for input " + std::to_string(i));
  return t;
}

std::vector<std::int64_t> int_values(const Node& n, const Tensor& t) {
  if (t.integral) return t.ints;
  fail(n, "expected an integer tensor");
}

std::size_t normalize_axis(const Node& n, std::int64_t axis, std::size_t rank) {
  const auto r = static_cast<std::int64_t>(rank);
  if (axis < -r || axis >= r) fail(n, "axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

void require_rank4(const Node& n, const Tensor& t) {
  if (t.shape.size() != 4) fail(n, "expected a rank-4 NCHW tensor");
}

// ---------------------------------------------------------------------------
// Spatial geometry shared by Conv and pooling

struct Window {
  std::int64_t kernel;
  std::int64_t stride;
  std::int64_t dilation;
  std::int64_t pad_begin;
  std::int64_t out;
};

std::vector<Window> spatial_windows(const Node& n, const Shape& in_spatial, const Shape& kernel, bool ceil_mode = false) {
  const std::size_t dims = in_spatial.size();
  auto strides = attr_ints(n, "strides", Shape(dims, 1));
  auto dilations = attr_ints(n, "dilations", Shape(dims, 1));
  auto pads = attr_ints(n, "pads", Shape(2 * dims, 0));
  const std::string auto_pad = attr_string(n, "auto_pad", "NOTSET");
  if (strides.size() != dims || dilations.size() != dims || pads.size() != 2 * dims || kernel.size() != dims) {
    fail(n, "spatial attribute lengths do not match the input rank");
  }
  std::vector<Window> w(dims);
  for (std::size_t d = 0; d < dims; ++d) {
    const std::int64_t in = in_spatial[d];
    const std::int64_t k = kernel[d];
    const std::int64_t s = strides[d];
    const std::int64_t dil = dilations[d];
    if (k < 1 || s < 1 || dil < 1) fail(n, "kernel, stride and dilation must be positive");
    const std::int64_t span = dil * (k - 1) + 1;
    std::int64_t begin = pads[d];
    std::int64_t end = pads[d + dims];
    if (auto_pad == "SAME_UPPER" || auto_pad == "SAME_LOWER") {
      const std::int64_t out = (in + s - 1) / s;
      const std::int64_t total = std::max<std::int64_t>(0, (out - 1) * s + span - in);
      begin = auto_pad == "SAME_UPPER" ? total / 2 : total - total / 2;
      end = total - begin;
    } else if (auto_pad == "VALID") {
      begin = end = 0;
    } else if (auto_pad != "NOTSET") {
      fail(n, "unknown auto_pad '" + auto_pad + "'");
    }
    const std::int64_t padded = in + begin + end - span;
    if (padded < 0) fail(n, "kernel larger than padded input");
    const std::int64_t out = (ceil_mode ? (padded + s - 1) / s : padded / s) + 1;
    w[d] = {k, s, dil, begin, out};
  }
  return w;
}

// ---------------------------------------------------------------------------
// Operators

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

TensorPtr op_conv(const Node& n, const Env& env) {
  const Tensor& x = float_input(n, env, 0);
  const Tensor& w = float_input(n, env, 1);
  const Tensor* b = optional_input(n, env, 2);
  require_rank4(n, x);
  if (w.shape.size() != 4) fail(n, "only 2-D convolution is supported");
  const std::int64_t group = attr_int(n, "group", 1);
  const std::int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const std::int64_t M = w.shape[0], Cg = w.shape[1], kH = w.shape[2], kW = w.shape[3];
  if (group < 1 || C != Cg * group || M % group != 0) fail(n, "channel/group mismatch");
  if (b && b->numel() != static_cast<std::size_t>(M)) fail(n, "bias length mismatch");
  const auto kernel = attr_ints(n, "kernel_shape", {kH, kW});
  if (kernel != Shape{kH, kW}) fail(n, "kernel_shape disagrees with the weight tensor");
  const auto win = spatial_windows(n, {H, W}, {kH, kW});
  const std::int64_t oH = win[0].out, oW = win[1].out;
  const std::int64_t Mg = M / group;
  std::vector<float> y(static_cast<std::size_t>(N * M * oH * oW), 0.0f);

  const bool pointwise = kH == 1 && kW == 1 && win[0].stride == 1 && win[1].stride == 1 && win[0].pad_begin == 0 &&
                         win[1].pad_begin == 0 && oH == H && oW == W;
  const std::int64_t patch = Cg * kH * kW;
  std::vector<float> col;
  if (!pointwise && !(Cg == 1 && Mg == 1)) col.resize(static_cast<std::size_t>(patch * oH * oW));

  for (std::int64_t nb = 0; nb < N; ++nb) {
    for (std::int64_t g = 0; g < group; ++g) {
      const float* xg = x.data.data() + ((nb * C) + g * Cg) * H * W;
      float* yg = y.data() + ((nb * M) + g * Mg) * oH * oW;
      const float* wg = w.data.data() + g * Mg * patch;
      if (Cg == 1 && Mg == 1) {
        // depthwise
        for (std::int64_t oy = 0; oy < oH; ++oy) {
          for (std::int64_t ox = 0; ox < oW; ++ox) {
            float acc = 0.0f;
            for (std::int64_t ky = 0; ky < kH; ++ky) {
              const std::int64_t iy = oy * win[0].stride - win[0].pad_begin + ky * win[0].dilation;
              if (iy < 0 || iy >= H) continue;
              for (std::int64_t kx = 0; kx < kW; ++kx) {
                const std::int64_t ix = ox * win[1].stride - win[1].pad_begin + kx * win[1].dilation;
                if (ix < 0 || ix >= W) continue;
                acc += wg[ky * kW + kx] * xg[iy * W + ix];
              }
            }
            yg[oy * oW + ox] = acc;
          }
        }
        continue;
      }
      const float* cols = xg;
      if (!pointwise) {
        for (std::int64_t c = 0; c < Cg; ++c) {
          for (std::int64_t ky = 0; ky < kH; ++ky) {
            for (std::int64_t kx = 0; kx < kW; ++kx) {
              float* row = col.data() + ((c * kH + ky) * kW + kx) * oH * oW;
              for (std::int64_t oy = 0; oy < oH; ++oy) {
                const std::int64_t iy = oy * win[0].stride - win[0].pad_begin + ky * win[0].dilation;
                for (std::int64_t ox = 0; ox < oW; ++ox) {
                  const std::int64_t ix = ox * win[1].stride - win[1].pad_begin + kx * win[1].dilation;
                  row[oy * oW + ox] = (iy < 0 || iy >= H || ix < 0 || ix >= W) ? 0.0f : xg[(c * H + iy) * W + ix];
                }
              }
            }
          }
        }
        cols = col.data();
      }
      Eigen::Map<const RowMatrix> wm(wg, Mg, patch);
      Eigen::Map<const RowMatrix> xm(cols, patch, oH * oW);
      Eigen::Map<RowMatrix> ym(yg, Mg, oH * oW);
      ym.noalias() = wm * xm;
    }
    if (b) {
      for (std::int64_t m = 0; m < M; ++m) {
        float* ym = y.data() + (nb * M + m) * oH * oW;
        for (std::int64_t i = 0; i < oH * oW; ++i) ym[i] += b->data[static_cast<std::size_t>(m)];
      }
    }
  }
  return make_float({N, M, oH, oW}, std::move(y));
}

TensorPtr op_pool(const Node& n, const Env& env, bool average) {
  const Tensor& x = float_input(n, env, 0);
  require_rank4(n, x);
  if (n.outputs.size() > 1 && !n.outputs[1].empty()) fail(n, "pooling indices output is not supported");
  const auto kernel = attr_ints(n, "kernel_shape");
  if (kernel.size() != 2) fail(n, "only 2-D pooling is supported");
  const bool ceil_mode = attr_int(n, "ceil_mode", 0) != 0;
  const bool include_pad = attr_int(n, "count_include_pad", 0) != 0;
  const std::int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const auto win = spatial_windows(n, {H, W}, kernel, ceil_mode);
  const std::int64_t oH = win[0].out, oW = win[1].out;
  std::vector<float> y(static_cast<std::size_t>(N * C * oH * oW));
  for (std::int64_t plane = 0; plane < N * C; ++plane) {
    const float* xp = x.data.data() + plane * H * W;
    float* yp = y.data() + plane * oH * oW;
    for (std::int64_t oy = 0; oy < oH; ++oy) {
      for (std::int64_t ox = 0; ox < oW; ++ox) {
        float acc = average ? 0.0f : -std::numeric_limits<float>::infinity();
        std::int64_t count = 0;
        std::int64_t padded_count = 0;
        for (std::int64_t ky = 0; ky < kernel[0]; ++ky) {
          const std::int64_t iy = oy * win[0].stride - win[0].pad_begin + ky * win[0].dilation;
          for (std::int64_t kx = 0; kx < kernel[1]; ++kx) {
            const std::int64_t ix = ox * win[1].stride - win[1].pad_begin + kx * win[1].dilation;
            const bool inside_padded = iy < H + win[0].pad_begin && ix < W + win[1].pad_begin;
            if (iy < 0 || iy >= H || ix < 0 || ix >= W) {
              if (inside_padded) ++padded_count;
              continue;
            }
            const float v = xp[iy * W + ix];
            acc = average ? acc + v : std::max(acc, v);
            ++count;
            ++padded_count;
          }
        }
        if (average) acc /= static_cast<float>(std::max<std::int64_t>(1, include_pad ? padded_count : count));
        yp[oy * oW + ox] = acc;
      }
    }
  }
  return make_float({N, C, oH, oW}, std::move(y));
}

TensorPtr op_global_average(const Node& n, const Env& env) {
  const Tensor& x = float_input(n, env, 0);
  if (x.shape.size() < 3) fail(n, "expected a spatial tensor");
  const std::int64_t planes = x.shape[0] * x.shape[1];
  const auto area = static_cast<std::int64_t>(x.numel()) / std::max<std::int64_t>(1, planes);
  std::vector<float> y(static_cast<std::size_t>(planes));
  for (std::int64_t p = 0; p < planes; ++p) {
    double sum = 0.0;
    for (std::int64_t i = 0; i < area; ++i) sum += x.data[static_cast<std::size_t>(p * area + i)];
    y[static_cast<std::size_t>(p)] = static_cast<float>(sum / static_cast<double>(area));
  }
  Shape shape(x.shape.size(), 1);
  shape[0] = x.shape[0];
  shape[1] = x.shape[1];
  return make_float(shape, std::move(y));
}

TensorPtr op_batchnorm(const Node& n, const Env& env) {
  const Tensor& x = float_input(n, env, 0);
  const Tensor& scale = float_input(n, env, 1);
  const Tensor& bias = float_input(n, env, 2);
  const Tensor& mean = float_input(n, env, 3);
  const Tensor& var = float_input(n, env, 4);
  if (x.shape.size() < 2) fail(n, "expected at least rank 2");
  const auto C = static_cast<std::size_t>(x.shape[1]);
  if (scale.numel() != C || bias.numel() != C || mean.numel() != C || var.numel() != C) {
    fail(n, "parameter length does not match the channel count");
  }
  const float eps = attr_float(n, "epsilon", 1e-5f);
  const std::size_t inner = x.numel() / (static_cast<std::size_t>(x.shape[0]) * C);
  std::vector<float> y(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const std::size_t c = (i / inner) % C;
    y[i] = scale.data[c] * (x.data[i] - mean.data[c]) / std::sqrt(var.data[c] + eps) + bias.data[c];
  }
  return make_float(x.shape, std::move(y));
}

template <typename F>
TensorPtr unary(const Node& n, const Env& env, F f) {
  const Tensor& x = float_input(n, env, 0);
  std::vector<float> y(x.data.size());
  std::transform(x.data.begin(), x.data.end(), y.begin(), f);
  return make_float(x.shape, std::move(y));
}

TensorPtr op_clip(const Node& n, const Env& env, std::int64_t opset) {
  float lo = -std::numeric_limits<float>::infinity();
  float hi = std::numeric_limits<float>::infinity();
  if (opset < 11) {
    lo = attr_float(n, "min", lo);
    hi = attr_float(n, "max", hi);
  } else {
    if (const Tensor* t = optional_input(n, env, 1)) {
      if (t->integral || t->numel() != 1) fail(n, "min must be a float scalar");
      lo = t->data[0];
    }
    if (const Tensor* t = optional_input(n, env, 2)) {
      if (t->integral || t->numel() != 1) fail(n, "max must be a float scalar");
      hi = t->data[0];
    }
  }
  return unary(n, env, [lo, hi](float v) { return std::min(std::max(v, lo), hi); });
}

Shape broadcast_shape(const Node& n, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) fail(n, "shapes are not broadcastable");
    out[i] = da == 1 ? db : da;
  }
  return out;
}

std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t o = i + (out.size() - in.size());
    strides[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

template <typename F>
TensorPtr binary(const Node& n, const Env& env, F f) {
  const Tensor& a = float_input(n, env, 0);
  const Tensor& b = float_input(n, env, 1);
  if (a.shape == b.shape) {
    std::vector<float> y(a.data.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(a.data[i], b.data[i]);
    return make_float(a.shape, std::move(y));
  }
  const Shape shape = broadcast_shape(n, a.shape, b.shape);
  const auto sa = broadcast_strides(a.shape, shape);
  const auto sb = broadcast_strides(b.shape, shape);
  std::size_t total = 1;
  for (auto d : shape) total *= static_cast<std::size_t>(d);
  std::vector<float> y(total);
  std::vector<std::int64_t> idx(shape.size(), 0);
  std::int64_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < total; ++i) {
    y[i] = f(a.data[static_cast<std::size_t>(oa)], b.data[static_cast<std::size_t>(ob)]);
    for (std::size_t d = shape.size(); d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < shape[d]) break;
      oa -= sa[d] * shape[d];
      ob -= sb[d] * shape[d];
      idx[d] = 0;
    }
  }
  return make_float(shape, std::move(y));
}

TensorPtr op_pad(const Node& n, const Env& env, std::int64_t opset) {
  const Tensor& x = float_input(n, env, 0);
  if (attr_string(n, "mode", "constant") != "constant") fail(n, "only constant padding is supported");
  std::vector<std::int64_t> pads;
  float value = 0.0f;
  if (opset < 11) {
    pads = attr_ints(n, "pads");
    value = attr_float(n, "value", 0.0f);
  } else {
    pads = int_values(n, input(n, env, 1));
    if (const Tensor* v = optional_input(n, env, 2)) {
      if (v->integral || v->numel() != 1) fail(n, "constant_value must be a float scalar");
      value = v->data[0];
    }
    if (optional_input(n, env, 3)) fail(n, "the axes input is not supported");
  }
  const std::size_t rank = x.shape.size();
  if (pads.size() != 2 * rank) fail(n, "pads length does not match the input rank");
  Shape out(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pads[d] < 0 || pads[d + rank] < 0) fail(n, "negative pads are not supported");
    out[d] = x.shape[d] + pads[d] + pads[d + rank];
  }
  std::size_t total = 1;
  for (auto d : out) total *= static_cast<std::size_t>(d);
  std::vector<float> y(total, value);
  std::vector<std::int64_t> idx(rank, 0);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    std::int64_t o = 0;
    for (std::size_t d = 0; d < rank; ++d) o = o * out[d] + idx[d] + pads[d];
    y[static_cast<std::size_t>(o)] = x.data[i];
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < x.shape[d]) break;
      idx[d] = 0;
    }
  }
  return make_float(out, std::move(y));
}

TensorPtr op_transpose(const Node& n, const Env& env) {
  const Tensor& x = input(n, env, 0);
  const std::size_t rank = x.shape.size();
  Shape perm_default(rank);
  for (std::size_t i = 0; i < rank; ++i) perm_default[i] = static_cast<std::int64_t>(rank - 1 - i);
  const auto perm = attr_ints(n, "perm", perm_default);
  if (perm.size() != rank) fail(n, "perm length does not match the input rank");
  std::vector<bool> seen(rank, false);
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const auto p = normalize_axis(n, perm[i], rank);
    if (seen[p]) fail(n, "perm is not a permutation");
    seen[p] = true;
    out[i] = x.shape[p];
  }
  std::vector<std::int64_t> in_strides(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_strides[d - 1] = in_strides[d] * x.shape[d];
  const std::size_t total = x.numel();
  auto permute = [&]<typename T>(const std::vector<T>& src) {
    std::vector<T> dst(total);
    std::vector<std::int64_t> idx(rank, 0);
    for (std::size_t i = 0; i < total; ++i) {
      std::int64_t off = 0;
      for (std::size_t d = 0; d < rank; ++d) off += idx[d] * in_strides[static_cast<std::size_t>(perm[d])];
      dst[i] = src[static_cast<std::size_t>(off)];
      for (std::size_t d = rank; d-- > 0;) {
        if (++idx[d] < out[d]) break;
        idx[d] = 0;
      }
    }
    return dst;
  };
  return x.integral ? make_ints(out, permute(x.ints)) : make_float(out, permute(x.data));
}

TensorPtr reshaped(const Tensor& x, Shape shape) {
  auto t = std::make_shared<Tensor>(x);
  t->shape = std::move(shape);
  return t;
}

TensorPtr op_reshape(const Node& n, const Env& env) {
  const Tensor& x = input(n, env, 0);
  auto target = int_values(n, input(n, env, 1));
  const bool allow_zero = attr_int(n, "allowzero", 0) != 0;
  std::int64_t known = 1;
  std::size_t infer = target.size();
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] == 0 && !allow_zero) {
      if (i >= x.shape.size()) fail(n, "zero dimension refers past the input rank");
      target[i] = x.shape[i];
    }
    if (target[i] == -1) {
      if (infer != target.size()) fail(n, "more than one inferred dimension");
      infer = i;
    } else if (target[i] < 0) {
      fail(n, "invalid target dimension");
    } else {
      known *= target[i];
    }
  }
  const auto total = static_cast<std::int64_t>(x.numel());
  if (infer != target.size()) {
    if (known == 0 || total % known != 0) fail(n, "cannot infer dimension");
    target[infer] = total / known;
  } else if (known != total) {
    fail(n, "element count changes");
  }
  return reshaped(x, target);
}

TensorPtr op_flatten(const Node& n, const Env& env) {
  const Tensor& x = input(n, env, 0);
  const auto rank = x.shape.size();
  std::int64_t axis = attr_int(n, "axis", 1);
  if (axis < 0) axis += static_cast<std::int64_t>(rank);
  if (axis < 0 || axis > static_cast<std::int64_t>(rank)) fail(n, "axis out of range");
  std::int64_t outer = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= x.shape[static_cast<std::size_t>(i)];
  return reshaped(x, {outer, static_cast<std::int64_t>(x.numel()) / std::max<std::int64_t>(outer, 1)});
}

std::vector<std::int64_t> axes_from(const Node& n, const Env& env, std::int64_t opset, std::int64_t input_from) {
  if (opset >= input_from) {
    if (const Tensor* t = optional_input(n, env, 1)) return int_values(n, *t);
    return {};
  }
  return attr_ints(n, "axes");
}

TensorPtr op_squeeze(const Node& n, const Env& env, std::int64_t opset) {
  const Tensor& x = input(n, env, 0);
  const auto axes = axes_from(n, env, opset, 13);
  std::set<std::size_t> drop;
  for (auto a : axes) drop.insert(normalize_axis(n, a, x.shape.size()));
  Shape out;
  for (std::size_t d = 0; d < x.shape.size(); ++d) {
    const bool selected = axes.empty() ? x.shape[d] == 1 : drop.count(d) > 0;
    if (selected && x.shape[d] != 1) fail(n, "cannot squeeze a non-unit dimension");
    if (!selected) out.push_back(x.shape[d]);
  }
  return reshaped(x, out);
}

TensorPtr op_unsqueeze(const Node& n, const Env& env, std::int64_t opset) {
  const Tensor& x = input(n, env, 0);
  const auto axes = axes_from(n, env, opset, 13);
  const std::size_t rank = x.shape.size() + axes.size();
  std::set<std::size_t> add;
  for (auto a : axes) add.insert(normalize_axis(n, a, rank));
  if (add.size() != axes.size()) fail(n, "duplicate axes");
  Shape out;
  std::size_t src = 0;
  for (std::size_t d = 0; d < rank; ++d) out.push_back(add.count(d) ? 1 : x.shape[src++]);
  return reshaped(x, out);
}

TensorPtr op_concat(const Node& n, const Env& env) {
  if (n.inputs.empty()) fail(n, "no inputs");
  const Tensor& first = float_input(n, env, 0);
  const std::size_t rank = first.shape.size();
  const std::size_t axis = normalize_axis(n, attr_int(n, "axis", 0), rank);
  Shape out = first.shape;
  out[axis] = 0;
  std::vector<const Tensor*> parts;
  for (std::size_t i = 0; i < n.inputs.size(); ++i) {
    const Tensor& t = float_input(n, env, i);
    if (t.shape.size() != rank) fail(n, "rank mismatch");
    for (std::size_t d = 0; d < rank; ++d) {
      if (d != axis && t.shape[d] != first.shape[d]) fail(n, "shape mismatch");
    }
    out[axis] += t.shape[axis];
    parts.push_back(&t);
  }
  std::int64_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= out[d];
  for (std::size_t d = axis + 1; d < rank; ++d) inner *= out[d];
  std::vector<float> y;
  y.reserve(static_cast<std::size_t>(outer * out[axis] * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    for (const Tensor* t : parts) {
      const std::int64_t chunk = t->shape[axis] * inner;
      const auto begin = t->data.begin() + o * chunk;
      y.insert(y.end(), begin, begin + chunk);
    }
  }
  return make_float(out, std::move(y));
}

TensorPtr op_reduce_mean(const Node& n, const Env& env, std::int64_t opset) {
  const Tensor& x = float_input(n, env, 0);
  const std::size_t rank = x.shape.size();
  auto axes = axes_from(n, env, opset, 18);
  std::vector<bool> reduce(rank, axes.empty());
  for (auto a : axes) reduce[normalize_axis(n, a, rank)] = true;
  const bool keep = attr_int(n, "keepdims", 1) != 0;
  Shape kept(rank);
  for (std::size_t d = 0; d < rank; ++d) kept[d] = reduce[d] ? 1 : x.shape[d];
  std::size_t total = 1;
  for (auto d : kept) total *= static_cast<std::size_t>(d);
  std::vector<double> sums(total, 0.0);
  const auto strides = broadcast_strides(kept, x.shape);
  std::vector<std::int64_t> idx(rank, 0);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    std::int64_t o = 0;
    for (std::size_t d = 0; d < rank; ++d) o += idx[d] * strides[d];
    sums[static_cast<std::size_t>(o)] += x.data[i];
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < x.shape[d]) break;
      idx[d] = 0;
    }
  }
  const double count = static_cast<double>(x.numel()) / static_cast<double>(std::max<std::size_t>(total, 1));
  std::vector<float> y(total);
  for (std::size_t i = 0; i < total; ++i) y[i] = static_cast<float>(sums[i] / count);
  Shape out;
  for (std::size_t d = 0; d < rank; ++d) {
    if (!reduce[d] || keep) out.push_back(kept[d]);
  }
  return make_float(out, std::move(y));
}

TensorPtr op_constant(const Node& n) {
  if (const auto* a = find_attr(n, "value"); a && a->kind == Attribute::Kind::tensor) return a->tensor;
  if (const auto* a = find_attr(n, "value_float"); a && a->kind == Attribute::Kind::f) return make_float({}, {a->f});
  if (const auto* a = find_attr(n, "value_floats"); a && a->kind == Attribute::Kind::floats) {
    return make_float({static_cast<std::int64_t>(a->floats.size())}, a->floats);
  }
  if (const auto* a = find_attr(n, "value_int"); a && a->kind == Attribute::Kind::i) return make_ints({}, {a->i});
  if (const auto* a = find_attr(n, "value_ints"); a && a->kind == Attribute::Kind::ints) {
    return make_ints({static_cast<std::int64_t>(a->ints.size())}, a->ints);
  }
  fail(n, "unsupported constant form");
}

}  // namespace

std::vector<TensorPtr> run_node(const Node& n, std::int64_t opset, const Env& env) {
  const std::string& op = n.op;
  if (op == "Conv") return {op_conv(n, env)};
  if (op == "BatchNormalization") return {op_batchnorm(n, env)};
  if (op == "Relu") return {unary(n, env, [](float v) { return v > 0.0f ? v : 0.0f; })};
  if (op == "Clip") return {op_clip(n, env, opset)};
  if (op == "LeakyRelu") {
    const float alpha = attr_float(n, "alpha", 0.01f);
    return {unary(n, env, [alpha](float v) { return v >= 0.0f ? v : alpha * v; })};
  }
  if (op == "Sigmoid") return {unary(n, env, [](float v) { return 1.0f / (1.0f + std::exp(-v)); })};
  if (op == "HardSigmoid") {
    const float alpha = attr_float(n, "alpha", 0.2f);
    const float beta = attr_float(n, "beta", 0.5f);
    return {unary(n, env, [=](float v) { return std::clamp(alpha * v + beta, 0.0f, 1.0f); })};
  }
  if (op == "Add") return {binary(n, env, [](float a, float b) { return a + b; })};
  if (op == "Sub") return {binary(n, env, [](float a, float b) { return a - b; })};
  if (op == "Mul") return {binary(n, env, [](float a, float b) { return a * b; })};
  if (op == "Div") return {binary(n, env, [](float a, float b) { return a / b; })};
  if (op == "Pad") return {op_pad(n, env, opset)};
  if (op == "MaxPool") return {op_pool(n, env, false)};
  if (op == "AveragePool") return {op_pool(n, env, true)};
  if (op == "GlobalAveragePool") return {op_global_average(n, env)};
  if (op == "ReduceMean") return {op_reduce_mean(n, env, opset)};
  if (op == "Transpose") return {op_transpose(n, env)};
  if (op == "Reshape") return {op_reshape(n, env)};
  if (op == "Flatten") return {op_flatten(n, env)};
  if (op == "Squeeze") return {op_squeeze(n, env, opset)};
  if (op == "Unsqueeze") return {op_unsqueeze(n, env, opset)};
  if (op == "Concat") return {op_concat(n, env)};
  if (op == "Identity" || op == "Dropout") {
    auto it = env.find(n.inputs.at(0));
    if (it == env.end()) fail(n, "input is not available");
    return {it->second};
  }
  if (op == "Constant") return {op_constant(n)};
  fail(n, "operator is not supported");
}

// ---------------------------------------------------------------------------
// Model loading

namespace {

struct PoolMatch {
  bool matched = false;
  Layout layout = Layout::nchw;
};

// Whether `node` averages a rank-4 tensor over its full spatial extent.
PoolMatch global_pool_match(const Node& node, const Tensor& in, std::int64_t opset, const Env& env) {
  if (in.integral || in.shape.size() != 4) return {};
  if (node.op == "GlobalAveragePool") return {true, Layout::nchw};
  if (node.op == "AveragePool") {
    const auto kernel = attr_ints(node, "kernel_shape");
    const auto pads = attr_ints(node, "pads", Shape(4, 0));
    const bool unpadded = std::all_of(pads.begin(), pads.end(), [](auto p) { return p == 0; }) &&
                          attr_string(node, "auto_pad", "NOTSET") != "SAME_UPPER" &&
                          attr_string(node, "auto_pad", "NOTSET") != "SAME_LOWER";
    if (unpadded && kernel == Shape{in.shape[2], in.shape[3]}) return {true, Layout::nchw};
    return {};
  }
  if (node.op == "ReduceMean") {
    std::vector<std::int64_t> axes;
    if (opset >= 18) {
      if (node.inputs.size() > 1 && !node.inputs[1].empty()) {
        auto it = env.find(node.inputs[1]);
        if (it == env.end() || !it->second->integral) return {};
        axes = it->second->ints;
      }
    } else {
      axes = attr_ints(node, "axes");
    }
    for (auto& a : axes) {
      if (a < 0) a += 4;
    }
    std::sort(axes.begin(), axes.end());
    if (axes == std::vector<std::int64_t>{2, 3}) return {true, Layout::nchw};
    if (axes == std::vector<std::int64_t>{1, 2}) return {true, Layout::nhwc};
  }
  return {};
}

bool is_pool_candidate(const std::string& op) {
  return op == "GlobalAveragePool" || op == "AveragePool" || op == "ReduceMean";
}

}  // namespace

Model Model::parse(std::string_view bytes, const std::string& origin) {
  ::onnx::ModelProto proto;
  if (bytes.empty() || !proto.ParseFromArray(bytes.data(), static_cast<int>(bytes.size()))) {
    throw LoadError(origin, "not a valid ONNX model");
  }
  if (!proto.has_graph()) throw LoadError(origin, "model has no graph");

  Model m;
  m.origin_ = origin;
  for (const auto& imp : proto.opset_import()) {
    if (imp.domain().empty() || imp.domain() == "ai.onnx") m.opset_ = imp.version();
  }
  if (m.opset_ == 0) throw UnsupportedModel(origin + ": no default-domain opset import");

  const auto& graph = proto.graph();
  for (const auto& init : graph.initializer()) m.constants_[init.name()] = convert_tensor(init, origin);

  std::vector<const ::onnx::ValueInfoProto*> inputs;
  for (const auto& in : graph.input()) {
    if (!m.constants_.count(in.name())) inputs.push_back(&in);
  }
  if (inputs.size() != 1) {
    throw UnsupportedModel(origin + ": expected exactly one image input, found " + std::to_string(inputs.size()));
  }
  const auto& in = *inputs.front();
  m.input_name_ = in.name();
  const auto& type = in.type().tensor_type();
  if (type.elem_type() != ::onnx::TensorProto::FLOAT) throw UnsupportedModel(origin + ": image input must be float32");
  const auto& dims = type.shape().dim();
  if (dims.size() != 4) throw UnsupportedModel(origin + ": image input must be rank 4");
  auto dim = [&](int i) -> std::int64_t { return dims[i].has_dim_value() ? dims[i].dim_value() : -1; };
  std::int64_t h = -1, w = -1;
  if (dim(1) == 3) {
    m.input_layout_ = Layout::nchw;
    h = dim(2);
    w = dim(3);
  } else if (dim(3) == 3) {
    m.input_layout_ = Layout::nhwc;
    h = dim(1);
    w = dim(2);
  } else {
    throw UnsupportedModel(origin + ": cannot find a 3-channel axis in the image input");
  }
  if (h > 0 && w > 0) {
    if (h != w) throw UnsupportedModel(origin + ": non-square image input is not supported");
    m.side_ = static_cast<std::size_t>(h);
  }

  for (const auto& np : graph.node()) {
    Node node;
    node.name = np.name();
    node.op = np.op_type();
    if (!np.domain().empty() && np.domain() != "ai.onnx") {
      node.op = np.domain() + "::" + np.op_type();
    }
    node.inputs.assign(np.input().begin(), np.input().end());
    node.outputs.assign(np.output().begin(), np.output().end());
    for (const auto& a : np.attribute()) node.attrs[a.name()] = convert_attribute(a, origin);
    m.nodes_.push_back(std::move(node));
  }

  std::unordered_map<std::string, std::size_t> producer;
  for (std::size_t i = 0; i < m.nodes_.size(); ++i) {
    for (const auto& out : m.nodes_[i].outputs) producer[out] = i;
  }
  auto ancestors = [&](const std::string& value) {
    std::set<std::size_t> seen;
    std::vector<std::string> stack{value};
    while (!stack.empty()) {
      const std::string v = stack.back();
      stack.pop_back();
      auto it = producer.find(v);
      if (it == producer.end() || !seen.insert(it->second).second) continue;
      for (const auto& i : m.nodes_[it->second].inputs) {
        if (!i.empty()) stack.push_back(i);
      }
    }
    return std::vector<std::size_t>(seen.begin(), seen.end());
  };

  // Dry-run each pooling candidate's inputs on a blank image until one turns
  // out to average over the whole spatial extent.
  const std::vector<float> blank(m.side_ * m.side_ * 3, 0.0f);
  Env env;
  std::set<std::size_t> done;
  env[m.input_name_] = m.make_input(blank);
  for (const auto& [name, value] : m.constants_) env[name] = value;
  for (std::size_t i = 0; i < m.nodes_.size(); ++i) {
    const Node& node = m.nodes_[i];
    if (!is_pool_candidate(node.op) || node.inputs.empty()) continue;
    std::vector<std::size_t> steps = ancestors(node.inputs[0]);
    if (node.op == "ReduceMean" && node.inputs.size() > 1 && !node.inputs[1].empty()) {
      for (auto s : ancestors(node.inputs[1])) steps.push_back(s);
      std::sort(steps.begin(), steps.end());
    }
    for (auto s : steps) {
      if (done.count(s)) continue;
      const Node& step = m.nodes_[s];
      auto outs = run_node(step, m.opset_, env);
      for (std::size_t o = 0; o < outs.size() && o < step.outputs.size(); ++o) env[step.outputs[o]] = outs[o];
      done.insert(s);
    }
    auto it = env.find(node.inputs[0]);
    if (it == env.end()) throw UnsupportedModel(origin + ": pooling input '" + node.inputs[0] + "' is undefined");
    const auto match = global_pool_match(node, *it->second, m.opset_, env);
    if (!match.matched) continue;

    const auto plan = ancestors(node.inputs[0]);
    const bool has_conv = std::any_of(plan.begin(), plan.end(), [&](auto s) { return m.nodes_[s].op == "Conv"; });
    if (!has_conv) throw UnsupportedModel(origin + ": no convolution precedes the global pooling stage");
    m.plan_ = plan;
    m.tap_name_ = node.inputs[0];
    m.tap_layout_ = match.layout;
    const auto& s = it->second->shape;
    if (s[0] != 1) throw UnsupportedModel(origin + ": tapped activation must have batch size 1");
    m.tap_shape_ = match.layout == Layout::nchw
                       ? FeatureShape{static_cast<std::size_t>(s[2]), static_cast<std::size_t>(s[3]), static_cast<std::size_t>(s[1])}
                       : FeatureShape{static_cast<std::size_t>(s[1]), static_cast<std::size_t>(s[2]), static_cast<std::size_t>(s[3])};
    if (m.tap_shape_.size() == 0) throw UnsupportedModel(origin + ": tapped activation is empty");
    break;
  }
  if (m.tap_name_.empty()) {
    throw UnsupportedModel(origin + ": no global average pooling stage found; the model exposes no spatial features");
  }

  // Free intermediate values after their last consumer in the plan.
  std::unordered_map<std::string, std::size_t> last_use;
  for (std::size_t p = 0; p < m.plan_.size(); ++p) {
    for (const auto& i : m.nodes_[m.plan_[p]].inputs) last_use[i] = p;
  }
  m.release_after_.resize(m.plan_.size());
  for (const auto& [name, p] : last_use) {
    if (name != m.tap_name_ && !m.constants_.count(name) && name != m.input_name_) m.release_after_[p].push_back(name);
  }
  return m;
}

TensorPtr Model::make_input(std::span<const float> hwc) const {
  const auto s = static_cast<std::int64_t>(side_);
  if (input_layout_ == Layout::nhwc) return make_float({1, s, s, 3}, std::vector<float>(hwc.begin(), hwc.end()));
  std::vector<float> chw(hwc.size());
  const std::size_t area = side_ * side_;
  for (std::size_t i = 0; i < area; ++i) {
    for (std::size_t c = 0; c < 3; ++c) chw[c * area + i] = hwc[i * 3 + c];
  }
  return make_float({1, 3, s, s}, std::move(chw));
}

Env Model::execute(std::span<const float> hwc, const std::vector<std::size_t>& steps, const std::string& keep) const {
  Env env(constants_);
  env[input_name_] = make_input(hwc);
  for (std::size_t p = 0; p < steps.size(); ++p) {
    const Node& node = nodes_[steps[p]];
    auto outs = run_node(node, opset_, env);
    for (std::size_t o = 0; o < outs.size() && o < node.outputs.size(); ++o) env[node.outputs[o]] = std::move(outs[o]);
    for (const auto& dead : release_after_[p]) {
      if (dead != keep) env.erase(dead);
    }
  }
  return env;
}

std::vector<float> Model::run(std::span<const float> hwc) const {
  if (hwc.size() != side_ * side_ * 3) throw InvalidArgument("model input has the wrong size");
  const Env env = execute(hwc, plan_, tap_name_);
  const Tensor& tap = *env.at(tap_name_);
  const FeatureShape& s = tap_shape_;
  if (tap.numel() != s.size()) throw InvalidArgument("tapped activation changed shape");
  if (tap_layout_ == Layout::nchw) return tap.data;
  std::vector<float> maps(s.size());
  const std::size_t area = s.area();
  for (std::size_t i = 0; i < area; ++i) {
    for (std::size_t k = 0; k < s.channels; ++k) maps[k * area + i] = tap.data[i * s.channels + k];
  }
  return maps;
}

}  // namespace salient_teach::onnx_exec
