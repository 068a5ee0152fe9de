#include "wiss/backbone.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include "wiss/config_json.hpp"
#include "wiss/geometry.hpp"

namespace wiss {

namespace bd = backbone_detail;

namespace {

// Proposal head input: every feature channel at the cell's sample point plus
// rays of the sigma-2 channel in 8 directions.
constexpr int kRayDirections = 8;
constexpr int kRaySteps = 8;
constexpr int kRayStepPx = 3;
constexpr int kRayChannel = 2;
constexpr int kProposalInputs = bd::kFeatureChannels + kRayDirections * kRaySteps;
constexpr int kProposalHidden = 32;
constexpr int kProposalOutputs = 5;  // objectness logit + 4 box offsets

constexpr int kPositionFeatures = 8;
constexpr int kMaskInputs = bd::kFeatureChannels + kPositionFeatures;
constexpr int kMaskHidden = 24;

constexpr double kBoxScale = 16.0;
constexpr double kDetectionThreshold = 0.3;
constexpr double kNmsIou = 0.3;
constexpr int kMaxNegativesPerStep = 256;
constexpr int kBoxJitterPx = 2;
constexpr double kGradClipNorm = 5.0;
constexpr double kMinNormScale = 50.0;

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[8] = {'W', 'I', 'S', 'S', 'C', 'K', 'P', 'T'};

struct Mlp {
  int in;
  int hidden;
  int out;
  size_t offset;

  size_t count() const {
    return static_cast<size_t>(in) * hidden + hidden + static_cast<size_t>(hidden) * out + out;
  }
  size_t w1() const { return offset; }
  size_t b1() const { return w1() + static_cast<size_t>(in) * hidden; }
  size_t w2() const { return b1() + hidden; }
  size_t b2() const { return w2() + static_cast<size_t>(hidden) * out; }
};

constexpr Mlp kProposalMlp{kProposalInputs, kProposalHidden, kProposalOutputs, 0};
constexpr Mlp kMaskMlp{kMaskInputs, kMaskHidden, 1,
                       static_cast<size_t>(kProposalInputs) * kProposalHidden + kProposalHidden +
                           static_cast<size_t>(kProposalHidden) * kProposalOutputs + kProposalOutputs};

void mlp_forward(const Mlp& m, const std::vector<double>& p, const double* x, double* act, double* y) {
  for (int h = 0; h < m.hidden; ++h) {
    const double* w = &p[m.w1() + static_cast<size_t>(h) * m.in];
    double s = p[m.b1() + h];
    for (int i = 0; i < m.in; ++i) s += w[i] * x[i];
    act[h] = s > 0.0 ? s : 0.0;
  }
  for (int o = 0; o < m.out; ++o) {
    const double* w = &p[m.w2() + static_cast<size_t>(o) * m.hidden];
    double s = p[m.b2() + o];
    for (int h = 0; h < m.hidden; ++h) s += w[h] * act[h];
    y[o] = s;
  }
}

void mlp_backward(const Mlp& m, const std::vector<double>& p, const double* x, const double* act, const double* dy,
                  std::vector<double>& grad) {
  double dact[64];
  for (int h = 0; h < m.hidden; ++h) dact[h] = 0.0;
  for (int o = 0; o < m.out; ++o) {
    if (dy[o] == 0.0) continue;
    grad[m.b2() + o] += dy[o];
    const size_t row = m.w2() + static_cast<size_t>(o) * m.hidden;
    for (int h = 0; h < m.hidden; ++h) {
      grad[row + h] += dy[o] * act[h];
      dact[h] += dy[o] * p[row + h];
    }
  }
  for (int h = 0; h < m.hidden; ++h) {
    if (act[h] <= 0.0 || dact[h] == 0.0) continue;
    grad[m.b1() + h] += dact[h];
    double* g = &grad[m.w1() + static_cast<size_t>(h) * m.in];
    for (int i = 0; i < m.in; ++i) g[i] += dact[h] * x[i];
  }
}

double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

// Numerically stable binary cross-entropy on a logit.
double bce_logit(double z, double t) { return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z))); }

double smooth_l1(double d) { return std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5; }
double smooth_l1_grad(double d) { return std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0); }

std::vector<double> gaussian_kernel(double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<size_t>(2 * r + 1));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[static_cast<size_t>(i + r)];
  }
  for (auto& v : k) v /= sum;
  return k;
}

Image2 blur(const Image2& in, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const int h = in.height;
  const int w = in.width;
  Image2 tmp(h, w, 0.0);
  Image2 out(h, w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[static_cast<size_t>(i + r)] * in.at(y, std::clamp(x + i, 0, w - 1));
      tmp.at(y, x) = s;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -r; i <= r; ++i) s += k[static_cast<size_t>(i + r)] * tmp.at(std::clamp(y + i, 0, h - 1), x);
      out.at(y, x) = s;
    }
  }
  return out;
}

Image2 gradient_magnitude(const Image2& in) {
  if (in.height < 2 || in.width < 2) return Image2(in.height, in.width, 0.0);
  auto [gx, gy] = image_gradients(in);
  Image2 out(in.height, in.width, 0.0);
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = std::hypot(gx.data[i], gy.data[i]);
  return out;
}

struct CellGrid {
  int rows = 0;
  int cols = 0;
};

CellGrid cell_grid(int height, int width) {
  return {(height + bd::kGridStride - 1) / bd::kGridStride, (width + bd::kGridStride - 1) / bd::kGridStride};
}

Point2 cell_point(int gy, int gx, int height, int width) {
  return {static_cast<double>(std::min(width - 1, gx * bd::kGridStride + bd::kGridStride / 2)),
          static_cast<double>(std::min(height - 1, gy * bd::kGridStride + bd::kGridStride / 2))};
}

void proposal_inputs(const bd::FeatureStack& f, Point2 p, double* out) {
  const int px = static_cast<int>(p.x);
  const int py = static_cast<int>(p.y);
  for (int c = 0; c < bd::kFeatureChannels; ++c) out[c] = f.at(c, py, px);
  int k = bd::kFeatureChannels;
  for (int d = 0; d < kRayDirections; ++d) {
    const double angle = 2.0 * 3.14159265358979323846 * d / kRayDirections;
    const double dx = std::cos(angle);
    const double dy = std::sin(angle);
    for (int s = 1; s <= kRaySteps; ++s) {
      const int x = std::clamp(static_cast<int>(std::lround(px + dx * s * kRayStepPx)), 0, f.width - 1);
      const int y = std::clamp(static_cast<int>(std::lround(py + dy * s * kRayStepPx)), 0, f.height - 1);
      out[k++] = f.at(kRayChannel, y, x);
    }
  }
}

// Box edges are continuous: a box covering pixels x0..x1-1 spans [x0-0.5, x1-0.5].
std::array<double, 4> encode_box(Point2 p, const BBox& b) {
  const double l = std::max(0.5, p.x - (b.x0 - 0.5));
  const double t = std::max(0.5, p.y - (b.y0 - 0.5));
  const double r = std::max(0.5, (b.x1 - 0.5) - p.x);
  const double bt = std::max(0.5, (b.y1 - 0.5) - p.y);
  return {std::log(l / kBoxScale), std::log(t / kBoxScale), std::log(r / kBoxScale), std::log(bt / kBoxScale)};
}

BBox decode_box(Point2 p, const double* enc, int height, int width) {
  auto dist = [](double e) { return kBoxScale * std::exp(std::clamp(e, -4.0, 4.0)); };
  BBox b;
  b.x0 = static_cast<int>(std::lround(p.x - dist(enc[0]) + 0.5));
  b.y0 = static_cast<int>(std::lround(p.y - dist(enc[1]) + 0.5));
  b.x1 = static_cast<int>(std::lround(p.x + dist(enc[2]) + 0.5));
  b.y1 = static_cast<int>(std::lround(p.y + dist(enc[3]) + 0.5));
  b.x0 = std::clamp(b.x0, 0, width - 2);
  b.y0 = std::clamp(b.y0, 0, height - 2);
  b.x1 = std::clamp(b.x1, b.x0 + 2, width);
  b.y1 = std::clamp(b.y1, b.y0 + 2, height);
  return b;
}

double iou(const BBox& a, const BBox& b) {
  const int ix = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const int iy = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  const double inter = static_cast<double>(ix) * iy;
  const double uni = static_cast<double>(a.width()) * a.height() + static_cast<double>(b.width()) * b.height() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

void mask_inputs(const bd::FeatureStack& f, const BBox& box, int y, int x, double* in) {
  for (int c = 0; c < bd::kFeatureChannels; ++c) in[c] = f.at(c, y, x);
  const double cx = (box.x0 + box.x1 - 1) / 2.0;
  const double cy = (box.y0 + box.y1 - 1) / 2.0;
  const double u = (x - cx) / (box.width() / 2.0);
  const double v = (y - cy) / (box.height() / 2.0);
  double* p = in + bd::kFeatureChannels;
  p[0] = u;
  p[1] = v;
  p[2] = u * u;
  p[3] = v * v;
  p[4] = u * v;
  p[5] = u * u * v * v;
  p[6] = std::abs(u);
  p[7] = std::abs(v);
}

struct CellTarget {
  enum Kind { kNegative, kIgnore, kPositive } kind = kNegative;
  std::array<double, 4> box{};
};

std::vector<CellTarget> proposal_targets(const std::vector<BBox>& boxes, int height, int width) {
  const auto grid = cell_grid(height, width);
  std::vector<CellTarget> targets(static_cast<size_t>(grid.rows) * grid.cols);
  for (int gy = 0; gy < grid.rows; ++gy) {
    for (int gx = 0; gx < grid.cols; ++gx) {
      const Point2 p = cell_point(gy, gx, height, width);
      auto& t = targets[static_cast<size_t>(gy) * grid.cols + gx];
      double best = 1e300;
      for (const auto& b : boxes) {
        const double cx = (b.x0 + b.x1 - 1) / 2.0;
        const double cy = (b.y0 + b.y1 - 1) / 2.0;
        const double rx = std::max(2.0, 0.2 * b.width());
        const double ry = std::max(2.0, 0.2 * b.height());
        const double dx = std::abs(p.x - cx);
        const double dy = std::abs(p.y - cy);
        if (dx <= rx && dy <= ry) {
          const double d = dx * dx + dy * dy;
          if (d < best) {
            best = d;
            t.kind = CellTarget::kPositive;
            t.box = encode_box(p, b);
          }
        } else if (t.kind == CellTarget::kNegative && p.x >= b.x0 && p.x < b.x1 && p.y >= b.y0 && p.y < b.y1) {
          t.kind = CellTarget::kIgnore;
        }
      }
    }
  }
  return targets;
}

std::vector<double> init_params(std::uint64_t seed) {
  std::vector<double> p(bd::parameter_count(), 0.0);
  std::mt19937_64 rng(seed);
  auto fill = [&](const Mlp& m) {
    std::uniform_real_distribution<double> w1(-std::sqrt(6.0 / m.in), std::sqrt(6.0 / m.in));
    for (size_t i = m.w1(); i < m.b1(); ++i) p[i] = w1(rng);
    std::uniform_real_distribution<double> w2(-std::sqrt(6.0 / (m.hidden + m.out)), std::sqrt(6.0 / (m.hidden + m.out)));
    for (size_t i = m.w2(); i < m.b2(); ++i) p[i] = w2(rng);
  };
  fill(kProposalMlp);
  fill(kMaskMlp);
  p[kProposalMlp.b2()] = -2.0;  // objectness prior
  return p;
}

struct StepLosses {
  double cls = 0.0;
  double box = 0.0;
  double mask = 0.0;
  double edge = 0.0;
};

StepLosses slice_gradient(const std::vector<double>& p, const bd::FeatureStack& f,
                          const std::vector<InstanceMask>& labels, double alpha, std::mt19937_64& rng,
                          std::vector<double>& grad) {
  StepLosses out;
  const int height = f.height;
  const int width = f.width;

  std::vector<BBox> boxes;
  std::vector<const InstanceMask*> instances;
  for (const auto& l : labels) {
    if (auto b = mask_bbox(l.mask)) {
      boxes.push_back(*b);
      instances.push_back(&l);
    }
  }

  // Proposal head.
  const auto grid = cell_grid(height, width);
  const auto targets = proposal_targets(boxes, height, width);
  std::vector<int> positives;
  std::vector<int> negatives;
  for (int i = 0; i < static_cast<int>(targets.size()); ++i) {
    if (targets[static_cast<size_t>(i)].kind == CellTarget::kPositive) positives.push_back(i);
    if (targets[static_cast<size_t>(i)].kind == CellTarget::kNegative) negatives.push_back(i);
  }
  std::shuffle(negatives.begin(), negatives.end(), rng);
  if (static_cast<int>(negatives.size()) > kMaxNegativesPerStep) negatives.resize(kMaxNegativesPerStep);

  double x[kProposalInputs];
  double act[kProposalHidden];
  double y[kProposalOutputs];
  double dy[kProposalOutputs];
  auto run_cell = [&](int idx, double cls_weight, bool positive) {
    const int gy = idx / grid.cols;
    const int gx = idx % grid.cols;
    proposal_inputs(f, cell_point(gy, gx, height, width), x);
    mlp_forward(kProposalMlp, p, x, act, y);
    const double t = positive ? 1.0 : 0.0;
    out.cls += cls_weight * bce_logit(y[0], t);
    std::fill(dy, dy + kProposalOutputs, 0.0);
    dy[0] = cls_weight * (sigmoid(y[0]) - t);
    if (positive) {
      const auto& tb = targets[static_cast<size_t>(idx)].box;
      const double w = 1.0 / static_cast<double>(positives.size());
      for (int k = 0; k < 4; ++k) {
        const double d = y[1 + k] - tb[static_cast<size_t>(k)];
        out.box += w * smooth_l1(d);
        dy[1 + k] = w * smooth_l1_grad(d);
      }
    }
    mlp_backward(kProposalMlp, p, x, act, dy, grad);
  };
  const double pos_weight = positives.empty() ? 0.0 : 0.5 / static_cast<double>(positives.size());
  const double neg_weight = negatives.empty() ? 0.0 : (positives.empty() ? 1.0 : 0.5) / negatives.size();
  for (int idx : positives) run_cell(idx, pos_weight, true);
  for (int idx : negatives) run_cell(idx, neg_weight, false);

  // Mask head on jittered label boxes.
  if (!instances.empty()) {
    std::uniform_int_distribution<int> jitter(-kBoxJitterPx, kBoxJitterPx);
    const double inst_weight = 1.0 / static_cast<double>(instances.size());
    for (size_t n = 0; n < instances.size(); ++n) {
      BBox box = boxes[n];
      box.x0 = std::clamp(box.x0 + jitter(rng), 0, width - 2);
      box.y0 = std::clamp(box.y0 + jitter(rng), 0, height - 2);
      box.x1 = std::clamp(box.x1 + jitter(rng), box.x0 + 2, width);
      box.y1 = std::clamp(box.y1 + jitter(rng), box.y0 + 2, height);
      const BBox win = dilate(box, bd::kMaskMargin, height, width);
      const size_t npix = static_cast<size_t>(win.height()) * win.width();
      std::vector<double> inputs(npix * kMaskInputs);
      std::vector<double> acts(npix * kMaskHidden);
      Image2 logits(win.height(), win.width());
      Image2 probs(win.height(), win.width());
      Image2 target(win.height(), win.width());
      size_t k = 0;
      for (int yy = win.y0; yy < win.y1; ++yy) {
        for (int xx = win.x0; xx < win.x1; ++xx, ++k) {
          double* in = &inputs[k * kMaskInputs];
          mask_inputs(f, box, yy, xx, in);
          double z = 0.0;
          mlp_forward(kMaskMlp, p, in, &acts[k * kMaskHidden], &z);
          logits.data[k] = z;
          probs.data[k] = sigmoid(z);
          target.data[k] = instances[n]->mask.at(yy, xx) ? 1.0 : 0.0;
        }
      }
      const double npx = static_cast<double>(npix);
      double bce = 0.0;
      for (size_t i = 0; i < npix; ++i) bce += bce_logit(logits.data[i], target.data[i]);
      out.mask += inst_weight * bce / npx;
      const auto edge = edge_loss_with_grad(probs, target);
      out.edge += inst_weight * edge.value;
      for (size_t i = 0; i < npix; ++i) {
        const double pr = probs.data[i];
        const double dz = inst_weight * ((pr - target.data[i]) / npx + alpha * edge.grad.data[i] * pr * (1.0 - pr));
        if (dz == 0.0) continue;
        mlp_backward(kMaskMlp, p, &inputs[i * kMaskInputs], &acts[i * kMaskHidden], &dz, grad);
      }
    }
  }
  return out;
}

void check_slice(const TrainingSlice& s, const BackboneConfig& cfg) {
  if (s.image.height != cfg.input_size[0] || s.image.width != cfg.input_size[1]) {
    throw Error(ErrorCode::kShapeMismatch, "image " + std::to_string(s.image.height) + "x" +
                                               std::to_string(s.image.width) + " does not match input_size");
  }
  if (s.labels.empty()) throw Error(ErrorCode::kEmptyTrainingSet, "training slice without labels");
  for (const auto& l : s.labels) {
    if (!l.mask.same_shape(s.image)) throw Error(ErrorCode::kShapeMismatch, "label '" + l.vertebra_id + "' shape");
  }
}

void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

nlohmann::json log_to_json(const std::vector<EpochLosses>& log) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : log) {
    j.push_back({{"cls", e.cls}, {"box", e.box}, {"mask", e.mask}, {"edge", e.edge}, {"total", e.total}});
  }
  return j;
}

}  // namespace

namespace backbone_detail {

size_t parameter_count() { return kProposalMlp.count() + kMaskMlp.count(); }

FeatureStack compute_features(const Image2& image) {
  // Robust normalization: median to 0, 99th percentile to 1.
  std::vector<double> sorted = image.data;
  const size_t n = sorted.size();
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(n / 2), sorted.end());
  const double median = sorted[n / 2];
  const size_t p99_idx = std::min(n - 1, static_cast<size_t>(0.99 * static_cast<double>(n)));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(p99_idx), sorted.end());
  const double scale = std::max(sorted[p99_idx] - median, kMinNormScale);

  Image2 norm(image.height, image.width);
  for (size_t i = 0; i < n; ++i) norm.data[i] = (image.data[i] - median) / scale;

  const Image2 g1 = blur(norm, 1.0);
  const Image2 g2 = blur(norm, 2.0);
  const Image2 g4 = blur(norm, 4.0);
  const Image2 g8 = blur(norm, 8.0);
  const Image2 m1 = gradient_magnitude(g1);
  const Image2 m2 = gradient_magnitude(g2);

  FeatureStack f;
  f.height = image.height;
  f.width = image.width;
  f.data.resize(static_cast<size_t>(kFeatureChannels) * n);
  for (size_t i = 0; i < n; ++i) {
    f.data[0 * n + i] = static_cast<float>(norm.data[i]);
    f.data[1 * n + i] = static_cast<float>(g1.data[i]);
    f.data[2 * n + i] = static_cast<float>(g2.data[i]);
    f.data[3 * n + i] = static_cast<float>(g4.data[i]);
    f.data[4 * n + i] = static_cast<float>(m1.data[i]);
    f.data[5 * n + i] = static_cast<float>(m2.data[i]);
    f.data[6 * n + i] = static_cast<float>(g1.data[i] - g4.data[i]);
    f.data[7 * n + i] = static_cast<float>(g8.data[i]);
  }
  return f;
}

}  // namespace backbone_detail

void validate(const BackboneConfig& cfg, bool warm_start) {
  std::vector<std::string> errors;
  if (cfg.input_size[0] < 8 || cfg.input_size[1] < 8) errors.push_back("input_size must be at least 8x8");
  if (cfg.max_instances < 1) errors.push_back("max_instances must be >= 1");
  if (!(cfg.learning_rate > 0.0)) errors.push_back("learning_rate must be > 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) errors.push_back("momentum must be in [0,1)");
  if (cfg.epochs < (warm_start ? 0 : 1)) errors.push_back("epochs must be >= 1 (>= 0 when warm-starting)");
  if (!(cfg.edge_loss_alpha >= 0.0)) errors.push_back("edge_loss_alpha must be >= 0");
  throw_if_errors(errors, "backbone config");
}

nlohmann::json to_json(const BackboneConfig& cfg) {
  return {{"input_size", cfg.input_size},       {"max_instances", cfg.max_instances},
          {"learning_rate", cfg.learning_rate}, {"momentum", cfg.momentum},
          {"epochs", cfg.epochs},               {"edge_loss_alpha", cfg.edge_loss_alpha},
          {"seed", cfg.seed}};
}

BackboneConfig backbone_config_from_json(const nlohmann::json& j, const std::string& path,
                                         std::vector<std::string>& errors, bool allow_zero_epochs) {
  const BackboneConfig d;
  JsonReader r(j, path, errors);
  BackboneConfig c;
  c.input_size = r.get("input_size", d.input_size);
  c.max_instances = r.get("max_instances", d.max_instances);
  c.learning_rate = r.get("learning_rate", d.learning_rate);
  c.momentum = r.get("momentum", d.momentum);
  c.epochs = r.get("epochs", d.epochs);
  c.edge_loss_alpha = r.get("edge_loss_alpha", d.edge_loss_alpha);
  c.seed = r.get<std::uint64_t>("seed", d.seed);
  r.finish();
  try {
    validate(c, allow_zero_epochs);
  } catch (const Error& e) {
    errors.push_back(path + ": " + e.what());
  }
  return c;
}

double total_loss(double cls, double box, double mask, double edge, double alpha) {
  for (double v : {cls, box, mask, edge, alpha}) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kNonFinite, "loss component is not finite");
  }
  return cls + box + mask + alpha * edge;
}

double edge_loss(const Image2& m, const Image2& g) {
  if (!m.same_shape(g)) throw Error(ErrorCode::kShapeMismatch, "edge loss inputs differ in shape");
  const auto [mx, my] = image_gradients(m);
  const auto [gx, gy] = image_gradients(g);
  double sum = 0.0;
  for (size_t i = 0; i < m.size(); ++i) {
    const double ex = mx.data[i] - gx.data[i];
    const double ey = my.data[i] - gy.data[i];
    sum += std::sqrt(ex * ex + ey * ey + kEdgeLossEpsilon);
  }
  return sum / static_cast<double>(m.size());
}

EdgeLossResult edge_loss_with_grad(const Image2& m, const Image2& g) {
  if (!m.same_shape(g)) throw Error(ErrorCode::kShapeMismatch, "edge loss inputs differ in shape");
  const auto [mx, my] = image_gradients(m);
  const auto [gx, gy] = image_gradients(g);
  const double n = static_cast<double>(m.size());
  Image2 ax(m.height, m.width);
  Image2 ay(m.height, m.width);
  double sum = 0.0;
  for (size_t i = 0; i < m.size(); ++i) {
    const double ex = mx.data[i] - gx.data[i];
    const double ey = my.data[i] - gy.data[i];
    const double r = std::sqrt(ex * ex + ey * ey + kEdgeLossEpsilon);
    sum += r;
    ax.data[i] = ex / (r * n);
    ay.data[i] = ey / (r * n);
  }
  return {sum / n, image_gradients_adjoint(ax, ay)};
}

TrainedModel train(const std::vector<TrainingSlice>& slices, const BackboneConfig& cfg,
                   const std::optional<TrainedModel>& init) {
  validate(cfg, init.has_value());
  if (slices.empty()) throw Error(ErrorCode::kEmptyTrainingSet, "no training slices");
  for (const auto& s : slices) check_slice(s, cfg);

  TrainedModel model;
  model.config = cfg;
  if (init) {
    if (init->params.size() != bd::parameter_count()) {
      throw Error(ErrorCode::kSizeMismatch, "warm-start model has the wrong parameter count");
    }
    model.params = init->params;
  } else {
    model.params = init_params(cfg.seed);
  }
  if (cfg.epochs == 0) return model;

  std::vector<bd::FeatureStack> features;
  features.reserve(slices.size());
  for (const auto& s : slices) features.push_back(bd::compute_features(s.image));

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<double> velocity(model.params.size(), 0.0);
  std::vector<double> grad(model.params.size(), 0.0);
  std::vector<size_t> order(slices.size());
  std::iota(order.begin(), order.end(), size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    StepLosses sum;
    for (size_t idx : order) {
      std::fill(grad.begin(), grad.end(), 0.0);
      const auto step = slice_gradient(model.params, features[idx], slices[idx].labels, cfg.edge_loss_alpha, rng, grad);
      sum.cls += step.cls;
      sum.box += step.box;
      sum.mask += step.mask;
      sum.edge += step.edge;
      double norm = 0.0;
      for (double g : grad) norm += g * g;
      norm = std::sqrt(norm);
      const double clip = norm > kGradClipNorm ? kGradClipNorm / norm : 1.0;
      for (size_t i = 0; i < grad.size(); ++i) {
        velocity[i] = cfg.momentum * velocity[i] + clip * grad[i];
        model.params[i] -= cfg.learning_rate * velocity[i];
      }
    }
    const double n = static_cast<double>(slices.size());
    EpochLosses e{sum.cls / n, sum.box / n, sum.mask / n, sum.edge / n, 0.0};
    e.total = total_loss(e.cls, e.box, e.mask, e.edge, cfg.edge_loss_alpha);
    model.training_log.push_back(e);
  }
  return model;
}

std::vector<InstancePrediction> predict(const TrainedModel& model, const Image2& image) {
  const auto& cfg = model.config;
  if (image.height != cfg.input_size[0] || image.width != cfg.input_size[1]) {
    throw Error(ErrorCode::kShapeMismatch, "image does not match the model input_size");
  }
  if (model.params.size() != bd::parameter_count()) throw Error(ErrorCode::kSizeMismatch, "model parameters");
  const int height = image.height;
  const int width = image.width;
  const auto f = bd::compute_features(image);
  const auto grid = cell_grid(height, width);

  std::vector<double> score(static_cast<size_t>(grid.rows) * grid.cols);
  std::vector<BBox> boxes(score.size());
  double x[kProposalInputs];
  double act[kProposalHidden];
  double y[kProposalOutputs];
  for (int gy = 0; gy < grid.rows; ++gy) {
    for (int gx = 0; gx < grid.cols; ++gx) {
      const Point2 p = cell_point(gy, gx, height, width);
      proposal_inputs(f, p, x);
      mlp_forward(kProposalMlp, model.params, x, act, y);
      const size_t i = static_cast<size_t>(gy) * grid.cols + gx;
      score[i] = sigmoid(y[0]);
      boxes[i] = decode_box(p, y + 1, height, width);
    }
  }

  std::vector<size_t> candidates;
  for (int gy = 0; gy < grid.rows; ++gy) {
    for (int gx = 0; gx < grid.cols; ++gx) {
      const size_t i = static_cast<size_t>(gy) * grid.cols + gx;
      if (score[i] < kDetectionThreshold) continue;
      bool peak = true;
      for (int ny = std::max(0, gy - 1); ny <= std::min(grid.rows - 1, gy + 1) && peak; ++ny) {
        for (int nx = std::max(0, gx - 1); nx <= std::min(grid.cols - 1, gx + 1); ++nx) {
          if (score[static_cast<size_t>(ny) * grid.cols + nx] > score[i]) {
            peak = false;
            break;
          }
        }
      }
      if (peak) candidates.push_back(i);
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(), [&](size_t a, size_t b) { return score[a] > score[b]; });

  std::vector<size_t> kept;
  for (size_t c : candidates) {
    if (static_cast<int>(kept.size()) >= cfg.max_instances) break;
    bool suppressed = false;
    for (size_t k : kept) {
      if (iou(boxes[c], boxes[k]) > kNmsIou) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(c);
  }

  std::vector<InstancePrediction> out;
  double in[kMaskInputs];
  double mact[kMaskHidden];
  for (size_t k : kept) {
    const BBox& box = boxes[k];
    const BBox win = dilate(box, bd::kMaskMargin, height, width);
    InstancePrediction pred;
    pred.objectness = std::clamp(score[k], 0.0, 1.0);
    pred.bbox = win;
    pred.prob_map = Image2(win.height(), win.width());
    for (int yy = win.y0; yy < win.y1; ++yy) {
      for (int xx = win.x0; xx < win.x1; ++xx) {
        mask_inputs(f, box, yy, xx, in);
        double z = 0.0;
        mlp_forward(kMaskMlp, model.params, in, mact, &z);
        pred.prob_map.at(yy - win.y0, xx - win.x0) = std::clamp(sigmoid(z), 0.0, 1.0);
      }
    }
    out.push_back(std::move(pred));
  }
  return out;
}

void write_checkpoint(const TrainedModel& model, const std::filesystem::path& path) {
  std::string blob(kCheckpointMagic, kCheckpointMagic + 8);
  for (int i = 0; i < 4; ++i) blob.push_back(static_cast<char>((kCheckpointVersion >> (8 * i)) & 0xFF));
  put_u64(blob, model.params.size());
  for (double v : model.params) put_u64(blob, std::bit_cast<std::uint64_t>(v));
  write_text_file(path, blob);

  nlohmann::json side;
  side["format_version"] = kCheckpointVersion;
  side["parameter_count"] = model.params.size();
  side["config"] = to_json(model.config);
  side["training_log"] = log_to_json(model.training_log);
  std::filesystem::path sidecar = path;
  sidecar.replace_extension(".json");
  write_text_file(sidecar, side.dump(2) + "\n");
}

TrainedModel read_checkpoint(const std::filesystem::path& path) {
  const std::string blob = read_text_file(path);
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  if (blob.size() < 20 || std::memcmp(blob.data(), kCheckpointMagic, 8) != 0) {
    throw Error(ErrorCode::kMalformed, path.string() + ": not a checkpoint");
  }
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= static_cast<std::uint32_t>(bytes[8 + i]) << (8 * i);
  if (version != kCheckpointVersion) throw Error(ErrorCode::kMalformed, "unsupported checkpoint version");
  const std::uint64_t n = get_u64(bytes + 12);
  if (blob.size() != 20 + n * 8) throw Error(ErrorCode::kSizeMismatch, path.string() + ": truncated checkpoint");

  TrainedModel model;
  model.params.resize(n);
  for (std::uint64_t i = 0; i < n; ++i) model.params[i] = std::bit_cast<double>(get_u64(bytes + 20 + 8 * i));

  std::filesystem::path sidecar = path;
  sidecar.replace_extension(".json");
  const auto side = nlohmann::json::parse(read_text_file(sidecar));
  std::vector<std::string> errors;
  model.config = backbone_config_from_json(side.at("config"), sidecar.string(), errors, true);
  throw_if_errors(errors, "checkpoint sidecar");
  for (const auto& e : side.at("training_log")) {
    model.training_log.push_back({e.at("cls").get<double>(), e.at("box").get<double>(), e.at("mask").get<double>(),
                                  e.at("edge").get<double>(), e.at("total").get<double>()});
  }
  return model;
}

}  // namespace wiss
