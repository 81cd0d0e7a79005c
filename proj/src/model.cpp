#include "ldseg/model.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "ldseg/errors.hpp"
#include "ldseg/hashing.hpp"
#include "ldseg/random.hpp"

namespace ldseg {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using RowVecMap = Eigen::Map<Eigen::RowVectorXf>;
using ConstRowVecMap = Eigen::Map<const Eigen::RowVectorXf>;

constexpr int kKernel = 3;
constexpr int kPad = 1;
// Inputs in [0,1] are mapped to roughly [-1,1].
constexpr float kInputCenter = 0.5f;
constexpr float kInputScale = 2.0f;

ConstMatMap as_matrix(const FloatBuffer& v, Eigen::Index rows, Eigen::Index cols) {
  return {v.data(), rows, cols};
}
MatMap as_matrix(FloatBuffer& v, Eigen::Index rows, Eigen::Index cols) { return {v.data(), rows, cols}; }

int conv_out(int in, int stride) { return (in + 2 * kPad - kKernel) / stride + 1; }

// Columns laid out (ky, kx, ci) to match weight rows.
void im2col(const Tensor4& in, int stride, int ho, int wo, FloatBuffer& cols) {
  const int ci = in.c;
  const std::size_t k = static_cast<std::size_t>(kKernel * kKernel * ci);
  cols.assign(static_cast<std::size_t>(in.n) * ho * wo * k, 0.0f);
  float* dst = cols.data();
  for (int n = 0; n < in.n; ++n) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        for (int ky = 0; ky < kKernel; ++ky) {
          const int iy = oy * stride - kPad + ky;
          for (int kx = 0; kx < kKernel; ++kx) {
            const int ix = ox * stride - kPad + kx;
            if (iy >= 0 && iy < in.h && ix >= 0 && ix < in.w) {
              const float* src = in.pixel((static_cast<std::size_t>(n) * in.h + iy) * in.w + ix);
              std::memcpy(dst, src, sizeof(float) * static_cast<std::size_t>(ci));
            }
            dst += ci;
          }
        }
      }
    }
  }
}

void col2im(const FloatBuffer& cols, int stride, int ho, int wo, Tensor4& out) {
  const int ci = out.c;
  std::fill(out.data.begin(), out.data.end(), 0.0f);
  const float* src = cols.data();
  for (int n = 0; n < out.n; ++n) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        for (int ky = 0; ky < kKernel; ++ky) {
          const int iy = oy * stride - kPad + ky;
          for (int kx = 0; kx < kKernel; ++kx) {
            const int ix = ox * stride - kPad + kx;
            if (iy >= 0 && iy < out.h && ix >= 0 && ix < out.w) {
              float* dst = out.pixel((static_cast<std::size_t>(n) * out.h + iy) * out.w + ix);
              for (int c = 0; c < ci; ++c) dst[c] += src[c];
            }
            src += ci;
          }
        }
      }
    }
  }
}

// Bilinear interpolation taps with half-pixel centers.
struct Taps {
  std::vector<int> lo, hi;
  FloatBuffer frac;
};

Taps make_taps(int in, int out) {
  Taps t;
  t.lo.resize(static_cast<std::size_t>(out));
  t.hi.resize(static_cast<std::size_t>(out));
  t.frac.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int lo = static_cast<int>(std::floor(src));
    lo = std::min(lo, in - 1);
    const auto i = static_cast<std::size_t>(o);
    t.lo[i] = lo;
    t.hi[i] = std::min(lo + 1, in - 1);
    t.frac[i] = static_cast<float>(src - lo);
  }
  return t;
}

void upsample_add(const Tensor4& in, const Taps& ty, const Taps& tx, Tensor4& out) {
  const int C = in.c;
  for (int n = 0; n < out.n; ++n) {
    for (int y = 0; y < out.h; ++y) {
      const auto yi = static_cast<std::size_t>(y);
      const float fy = ty.frac[yi];
      for (int x = 0; x < out.w; ++x) {
        const auto xi = static_cast<std::size_t>(x);
        const float fx = tx.frac[xi];
        auto src = [&](int yy, int xx) { return in.pixel((static_cast<std::size_t>(n) * in.h + yy) * in.w + xx); };
        const float* a = src(ty.lo[yi], tx.lo[xi]);
        const float* b = src(ty.lo[yi], tx.hi[xi]);
        const float* c = src(ty.hi[yi], tx.lo[xi]);
        const float* d = src(ty.hi[yi], tx.hi[xi]);
        float* o = out.pixel((static_cast<std::size_t>(n) * out.h + y) * out.w + x);
        const float wa = (1 - fy) * (1 - fx), wb = (1 - fy) * fx, wc = fy * (1 - fx), wd = fy * fx;
        for (int k = 0; k < C; ++k) o[k] += wa * a[k] + wb * b[k] + wc * c[k] + wd * d[k];
      }
    }
  }
}

void upsample_backward(const Tensor4& grad_out, const Taps& ty, const Taps& tx, Tensor4& grad_in) {
  std::fill(grad_in.data.begin(), grad_in.data.end(), 0.0f);
  const int C = grad_in.c;
  for (int n = 0; n < grad_out.n; ++n) {
    for (int y = 0; y < grad_out.h; ++y) {
      const auto yi = static_cast<std::size_t>(y);
      const float fy = ty.frac[yi];
      for (int x = 0; x < grad_out.w; ++x) {
        const auto xi = static_cast<std::size_t>(x);
        const float fx = tx.frac[xi];
        auto dst = [&](int yy, int xx) {
          return grad_in.pixel((static_cast<std::size_t>(n) * grad_in.h + yy) * grad_in.w + xx);
        };
        const float* g = grad_out.pixel((static_cast<std::size_t>(n) * grad_out.h + y) * grad_out.w + x);
        float* a = dst(ty.lo[yi], tx.lo[xi]);
        float* b = dst(ty.lo[yi], tx.hi[xi]);
        float* c = dst(ty.hi[yi], tx.lo[xi]);
        float* d = dst(ty.hi[yi], tx.hi[xi]);
        const float wa = (1 - fy) * (1 - fx), wb = (1 - fy) * fx, wc = fy * (1 - fx), wd = fy * fx;
        for (int k = 0; k < C; ++k) {
          a[k] += wa * g[k];
          b[k] += wb * g[k];
          c[k] += wc * g[k];
          d[k] += wd * g[k];
        }
      }
    }
  }
}

struct ToyTrace : ForwardTrace {
  Tensor4 input;                       // normalized images
  std::vector<FloatBuffer> cols;  // im2col per stage
  std::vector<Tensor4> act;            // post-ReLU activations per stage
  Taps ty, tx;
};

class ToyEncoderDecoder final : public NetworkBackend {
 public:
  void validate(const ArchitectureDescriptor& a) const override {
    if (a.in_channels <= 0 || a.num_classes < 3) throw ConfigError("toy network needs >=1 input channel, >=3 classes");
    if (a.widths.empty() || a.widths.size() != a.strides.size()) {
      throw ConfigError("widths and strides must be non-empty and equally long");
    }
    for (std::size_t i = 0; i < a.widths.size(); ++i) {
      if (a.widths[i] <= 0) throw ConfigError("stage widths must be positive");
      if (a.strides[i] != 1 && a.strides[i] != 2) throw ConfigError("stage strides must be 1 or 2");
    }
    if (a.skip_connection && a.strides[0] != 1) throw ConfigError("skip connection needs a stride-1 first stage");
    if (!a.atrous_rates.empty()) throw ConfigError("toy_encoder_decoder has no atrous head");
  }

  std::vector<Parameter> init(const ArchitectureDescriptor& a, std::uint64_t seed) const override {
    Rng rng(mix64(seed, 0x6d6f64656cULL));
    std::vector<Parameter> params;
    auto normal = [&](std::string name, std::vector<int> shape, int fan_in, double gain) {
      Parameter p{std::move(name), std::move(shape), {}};
      std::size_t count = 1;
      for (int s : p.shape) count *= static_cast<std::size_t>(s);
      p.value.resize(count);
      const double stddev = std::sqrt(gain / fan_in);
      for (auto& v : p.value) v = static_cast<float>(stddev * rng.normal());
      params.push_back(std::move(p));
    };
    auto zeros = [&](std::string name, int n) {
      params.push_back({std::move(name), {n}, FloatBuffer(static_cast<std::size_t>(n), 0.0f)});
    };
    int cin = a.in_channels;
    for (std::size_t i = 0; i < a.widths.size(); ++i) {
      const int cout = a.widths[i];
      const std::string stem = "enc" + std::to_string(i);
      normal(stem + ".weight", {kKernel, kKernel, cin, cout}, kKernel * kKernel * cin, 2.0);
      zeros(stem + ".bias", cout);
      cin = cout;
    }
    normal("head.deep.weight", {cin, a.num_classes}, cin, 1.0);
    zeros("head.deep.bias", a.num_classes);
    if (a.skip_connection) normal("head.skip.weight", {a.widths[0], a.num_classes}, a.widths[0], 1.0);
    return params;
  }

  Tensor4 forward(const ArchitectureDescriptor& a, const std::vector<Parameter>& params, const Tensor4& images,
                  std::unique_ptr<ForwardTrace>* trace_out) const override {
    auto trace = std::make_unique<ToyTrace>();
    trace->input = images;
    for (auto& v : trace->input.data) v = (v - kInputCenter) * kInputScale;

    const std::size_t stages = a.widths.size();
    trace->cols.resize(stages);
    trace->act.resize(stages);
    const Tensor4* x = &trace->input;
    for (std::size_t i = 0; i < stages; ++i) {
      const int stride = a.strides[i];
      const int ho = conv_out(x->h, stride), wo = conv_out(x->w, stride);
      const auto& W = params[2 * i].value;
      const auto& b = params[2 * i + 1].value;
      const int k = kKernel * kKernel * x->c;
      const int cout = a.widths[i];
      im2col(*x, stride, ho, wo, trace->cols[i]);
      Tensor4 out(x->n, ho, wo, cout);
      const auto rows = static_cast<Eigen::Index>(out.pixels());
      auto om = as_matrix(out.data, rows, cout);
      om.noalias() = as_matrix(trace->cols[i], rows, k) * as_matrix(W, k, cout);
      om.rowwise() += ConstRowVecMap(b.data(), cout);
      for (auto& v : out.data) v = std::max(v, 0.0f);
      trace->act[i] = std::move(out);
      x = &trace->act[i];
    }

    const std::size_t head = 2 * stages;
    const int C = a.num_classes;
    Tensor4 deep(x->n, x->h, x->w, C);
    {
      const auto rows = static_cast<Eigen::Index>(deep.pixels());
      auto dm = as_matrix(deep.data, rows, C);
      dm.noalias() = as_matrix(x->data, rows, x->c) * as_matrix(params[head].value, x->c, C);
      dm.rowwise() += ConstRowVecMap(params[head + 1].value.data(), C);
    }
    Tensor4 logits(images.n, images.h, images.w, C);
    trace->ty = make_taps(deep.h, logits.h);
    trace->tx = make_taps(deep.w, logits.w);
    upsample_add(deep, trace->ty, trace->tx, logits);
    if (a.skip_connection) {
      const Tensor4& s = trace->act[0];
      const auto rows = static_cast<Eigen::Index>(s.pixels());
      as_matrix(logits.data, rows, C).noalias() += as_matrix(s.data, rows, s.c) * as_matrix(params[head + 2].value, s.c, C);
    }
    if (trace_out != nullptr) *trace_out = std::move(trace);
    return logits;
  }

  Gradients backward(const ArchitectureDescriptor& a, const std::vector<Parameter>& params, const ForwardTrace& base,
                     const Tensor4& grad_logits) const override {
    const auto& trace = dynamic_cast<const ToyTrace&>(base);
    Gradients grads(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) grads[i].assign(params[i].value.size(), 0.0f);

    const std::size_t stages = a.widths.size();
    const std::size_t head = 2 * stages;
    const int C = a.num_classes;
    const auto full_rows = static_cast<Eigen::Index>(grad_logits.pixels());
    const auto g_full = as_matrix(grad_logits.data, full_rows, C);

    std::vector<Tensor4> g_act(stages);
    for (std::size_t i = 0; i < stages; ++i) g_act[i] = Tensor4(trace.act[i].n, trace.act[i].h, trace.act[i].w, trace.act[i].c);

    if (a.skip_connection) {
      const Tensor4& s = trace.act[0];
      as_matrix(grads[head + 2], s.c, C).noalias() = as_matrix(s.data, full_rows, s.c).transpose() * g_full;
      as_matrix(g_act[0].data, full_rows, s.c).noalias() = g_full * as_matrix(params[head + 2].value, s.c, C).transpose();
    }

    const Tensor4& last = trace.act[stages - 1];
    Tensor4 g_deep(last.n, last.h, last.w, C);
    upsample_backward(grad_logits, trace.ty, trace.tx, g_deep);
    {
      const auto rows = static_cast<Eigen::Index>(g_deep.pixels());
      const auto gd = as_matrix(g_deep.data, rows, C);
      as_matrix(grads[head], last.c, C).noalias() = as_matrix(last.data, rows, last.c).transpose() * gd;
      RowVecMap(grads[head + 1].data(), C) = gd.colwise().sum();
      as_matrix(g_act[stages - 1].data, rows, last.c).noalias() += gd * as_matrix(params[head].value, last.c, C).transpose();
    }

    FloatBuffer g_cols;
    for (std::size_t idx = stages; idx-- > 0;) {
      Tensor4& g = g_act[idx];
      const Tensor4& act = trace.act[idx];
      for (std::size_t j = 0; j < g.data.size(); ++j) {
        if (act.data[j] <= 0.0f) g.data[j] = 0.0f;
      }
      const Tensor4& in = idx == 0 ? trace.input : trace.act[idx - 1];
      const int k = kKernel * kKernel * in.c;
      const int cout = act.c;
      const auto rows = static_cast<Eigen::Index>(act.pixels());
      const auto gm = as_matrix(g.data, rows, cout);
      as_matrix(grads[2 * idx], k, cout).noalias() = as_matrix(trace.cols[idx], rows, k).transpose() * gm;
      RowVecMap(grads[2 * idx + 1].data(), cout) = gm.colwise().sum();
      if (idx == 0) break;
      g_cols.resize(static_cast<std::size_t>(rows) * static_cast<std::size_t>(k));
      as_matrix(g_cols, rows, k).noalias() = gm * as_matrix(params[2 * idx].value, k, cout).transpose();
      Tensor4 g_in(in.n, in.h, in.w, in.c);
      col2im(g_cols, a.strides[idx], act.h, act.w, g_in);
      Tensor4& prev = g_act[idx - 1];
      for (std::size_t j = 0; j < prev.data.size(); ++j) prev.data[j] += g_in.data[j];
    }
    return grads;
  }
};

const ToyEncoderDecoder kToyBackend;

}  // namespace

const NetworkBackend& network_backend(const std::string& name) {
  if (name == "toy_encoder_decoder") return kToyBackend;
  throw ConfigError("no network backend registered for architecture '" + name + "'");
}

SegmentationModel::SegmentationModel(ArchitectureDescriptor arch, std::uint64_t seed)
    : arch_(std::move(arch)), backend_(&network_backend(arch_.name)) {
  backend_->validate(arch_);
  params_ = backend_->init(arch_, seed);
}

SegmentationModel::SegmentationModel(ArchitectureDescriptor arch, std::vector<Parameter> params)
    : arch_(std::move(arch)), params_(std::move(params)), backend_(&network_backend(arch_.name)) {
  backend_->validate(arch_);
  const auto reference = backend_->init(arch_, 0);
  if (reference.size() != params_.size()) {
    throw FormatError("expected " + std::to_string(reference.size()) + " parameter arrays, found " +
                      std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < reference.size(); ++i) {
    if (reference[i].name != params_[i].name || reference[i].shape != params_[i].shape ||
        reference[i].value.size() != params_[i].value.size()) {
      throw FormatError("parameter '" + params_[i].name + "' does not match expected '" + reference[i].name + "'");
    }
  }
}

std::size_t SegmentationModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void SegmentationModel::check_images(const Tensor4& images) const {
  if (images.c != arch_.in_channels) {
    throw InputError("expected " + std::to_string(arch_.in_channels) + " image channels, got " +
                     std::to_string(images.c));
  }
  if (images.n <= 0 || images.h <= 0 || images.w <= 0) throw InputError("empty image batch");
  if (images.data.size() != static_cast<std::size_t>(images.n) * images.h * images.w * images.c) {
    throw InputError("image tensor size does not match its dimensions");
  }
}

Tensor4 SegmentationModel::forward(const Tensor4& images) const {
  check_images(images);
  return backend_->forward(arch_, params_, images, nullptr);
}

SegmentationModel::TrainingPass SegmentationModel::forward_train(const Tensor4& images) const {
  check_images(images);
  TrainingPass pass;
  pass.logits = backend_->forward(arch_, params_, images, &pass.trace);
  return pass;
}

Gradients SegmentationModel::backward(const TrainingPass& pass, const Tensor4& grad_logits) const {
  if (grad_logits.data.size() != pass.logits.data.size()) throw InputError("gradient shape does not match logits");
  return backend_->backward(arch_, params_, *pass.trace, grad_logits);
}

void SegmentationModel::set_zero() {
  for (auto& p : params_) std::fill(p.value.begin(), p.value.end(), 0.0f);
}

std::uint64_t SegmentationModel::fingerprint() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : params_) {
    h = fnv1a(p.name, h);
    h = fnv1a(std::as_bytes(std::span(p.value)), h);
  }
  return h;
}

std::string to_string(TrainingStage stage) {
  switch (stage) {
    case TrainingStage::initialized: return "initialized";
    case TrainingStage::source_pretrained: return "source_pretrained";
    case TrainingStage::adapted: return "adapted";
  }
  return "unknown";
}

TrainingStage parse_training_stage(const std::string& name) {
  for (auto s : {TrainingStage::initialized, TrainingStage::source_pretrained, TrainingStage::adapted}) {
    if (to_string(s) == name) return s;
  }
  throw FormatError("unknown training stage '" + name + "'");
}

}  // namespace ldseg
