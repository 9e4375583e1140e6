// Copyright 2026 The poco-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "poco/synthdata.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace poco::data {
namespace {

using body::kParts;

std::vector<std::vector<int>> children_of(const body::Skeleton& sk) {
  std::vector<std::vector<int>> ch(static_cast<std::size_t>(sk.parts()));
  for (int b = 1; b < sk.parts(); ++b) ch[static_cast<std::size_t>(sk.parent[static_cast<std::size_t>(b)])].push_back(b);
  return ch;
}

body::Vec3 sample_axis(Rng& rng) {
  body::Vec3 v(rng.normal(), rng.normal(), rng.normal());
  double n = v.norm();
  while (n < 1e-9) {
    v = body::Vec3(rng.normal(), rng.normal(), rng.normal());
    n = v.norm();
  }
  return v / n;
}

void sample_params(const SourceSpec& spec, SampleBatch& b, Eigen::Index i, Rng& rng) {
  for (int k = 0; k < kParts; ++k) {
    const auto uk = static_cast<std::size_t>(k);
    double angle = rng.normal(spec.angle_mean[uk], 1.0 / spec.concentration[uk]);
    angle = std::clamp(angle, 0.0, std::numbers::pi);
    b.pose.row(i).segment<3>(3 * k) = (angle * sample_axis(rng)).transpose();
  }
  for (int j = 0; j < body::kShapeDim; ++j) b.shape(i, j) = rng.normal(0.0, spec.shape_std);
  b.camera(i, 0) = rng.uniform(spec.camera_scale_min, spec.camera_scale_max);
  b.camera(i, 1) = rng.normal(0.0, spec.camera_shift_std);
  b.camera(i, 2) = rng.normal(0.0, spec.camera_shift_std);
}

void attach_joints(SampleBatch& b, Eigen::Index i) {
  const auto& sk = body::default_skeleton();
  const Eigen::MatrixXd j3 = body::forward_kinematics(sk, b.pose.row(i).transpose(), b.shape.row(i).transpose());
  const Eigen::MatrixXd j2 = body::project(j3, b.camera.row(i).transpose());
  for (int k = 0; k < kParts; ++k) {
    b.joints3d.row(i).segment<3>(3 * k) = j3.row(k);
    b.joints2d.row(i).segment<2>(2 * k) = j2.row(k);
  }
}

void render_with(SampleBatch& b, Eigen::Index i, double noise, double occlusion, int max_run, Rng& rng) {
  const auto mask = sample_occlusion(body::default_skeleton(), occlusion, max_run, rng);
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  int visible = 0;
  for (int k = 0; k < kParts; ++k) {
    // Noise is drawn for every part so the stream position does not depend
    // on the occlusion pattern.
    const double nx = rng.normal(0.0, 1.0) * noise;
    const double ny = rng.normal(0.0, 1.0) * noise;
    if (mask[static_cast<std::size_t>(k)]) {
      b.inputs(i, 2 * k) = 0.0;
      b.inputs(i, 2 * k + 1) = 0.0;
      b.inputs(i, kVisibilityOffset + k) = 0.0;
      continue;
    }
    const double x = b.joints2d(i, 2 * k) + nx;
    const double y = b.joints2d(i, 2 * k + 1) + ny;
    b.inputs(i, 2 * k) = x;
    b.inputs(i, 2 * k + 1) = y;
    b.inputs(i, kVisibilityOffset + k) = 1.0;
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
    ++visible;
  }
  if (visible >= 2) {
    const double w = xmax - xmin;
    const double h = ymax - ymin;
    b.inputs(i, kContextOffset) = std::max(w, h);
    b.inputs(i, kContextOffset + 1) = w / std::max(h, 1e-3);
  } else {
    b.inputs(i, kContextOffset) = 0.0;
    b.inputs(i, kContextOffset + 1) = 0.0;
  }
}

void append_rows(ad::Matrix& dst, const ad::Matrix& src) {
  if (dst.size() == 0) {
    dst = src;
    return;
  }
  ad::Matrix out(dst.rows() + src.rows(), dst.cols());
  out.topRows(dst.rows()) = dst;
  out.bottomRows(src.rows()) = src;
  dst = std::move(out);
}

}  // namespace

void SourceSpec::validate() const {
  if (!(occlusion_rate >= 0.0 && occlusion_rate <= 1.0))
    throw std::invalid_argument("occlusion rate must be in [0,1] for source " + name);
  if (!(keypoint_noise >= 0.0)) throw std::invalid_argument("keypoint noise must be >= 0 for source " + name);
  if (angle_mean.size() != kParts || concentration.size() != kParts)
    throw std::invalid_argument("pose prior needs one entry per part for source " + name);
  for (double c : concentration)
    if (!(c > 0.0)) throw std::invalid_argument("concentration must be positive for source " + name);
  if (max_run < 1) throw std::invalid_argument("max_run must be >= 1");
}

SourceSpec make_source(std::string name, double angle_mean, double concentration, double noise, double occlusion) {
  SourceSpec s;
  s.name = std::move(name);
  const auto ch = children_of(body::default_skeleton());
  for (int k = 0; k < kParts; ++k) {
    const auto uk = static_cast<std::size_t>(k);
    const bool leaf = ch[uk].empty();
    s.angle_mean[uk] = leaf ? 0.1 : angle_mean;
    s.concentration[uk] = leaf ? 20.0 : concentration;
  }
  s.keypoint_noise = noise;
  s.occlusion_rate = occlusion;
  return s;
}

std::vector<SourceSpec> default_sources() {
  return {make_source("clean", 0.35, 5.0, 0.005, 0.05), make_source("noisy", 0.40, 4.0, 0.02, 0.15),
          make_source("hard", 0.45, 3.5, 0.05, 0.35)};
}

SourceSpec wild_source() { return make_source("wild", 0.65, 3.0, 0.02, 0.2); }

// ------------------------------------------------------------- SampleBatch

SampleBatch allocate(Eigen::Index n) {
  SampleBatch b;
  b.inputs = ad::Matrix::Zero(n, kInputDim);
  b.pose = ad::Matrix::Zero(n, body::kPoseDim);
  b.shape = ad::Matrix::Zero(n, body::kShapeDim);
  b.camera = ad::Matrix::Zero(n, body::kCameraDim);
  b.joints3d = ad::Matrix::Zero(n, 3 * kParts);
  b.joints2d = ad::Matrix::Zero(n, 2 * kParts);
  b.source.assign(static_cast<std::size_t>(n), 0);
  return b;
}

SampleBatch SampleBatch::subset(std::span<const Eigen::Index> rows) const {
  SampleBatch out = allocate(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Eigen::Index i = rows[r];
    const auto ri = static_cast<Eigen::Index>(r);
    out.inputs.row(ri) = inputs.row(i);
    out.pose.row(ri) = pose.row(i);
    out.shape.row(ri) = shape.row(i);
    out.camera.row(ri) = camera.row(i);
    out.joints3d.row(ri) = joints3d.row(i);
    out.joints2d.row(ri) = joints2d.row(i);
    out.source[r] = source[static_cast<std::size_t>(i)];
  }
  return out;
}

SampleBatch SampleBatch::slice(Eigen::Index begin, Eigen::Index count) const {
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(count));
  std::iota(rows.begin(), rows.end(), begin);
  return subset(rows);
}

void SampleBatch::append(const SampleBatch& o) {
  append_rows(inputs, o.inputs);
  append_rows(pose, o.pose);
  append_rows(shape, o.shape);
  append_rows(camera, o.camera);
  append_rows(joints3d, o.joints3d);
  append_rows(joints2d, o.joints2d);
  source.insert(source.end(), o.source.begin(), o.source.end());
}

int SampleBatch::occluded_count(Eigen::Index i) const {
  int n = 0;
  for (int k = 0; k < kParts; ++k) n += inputs(i, kVisibilityOffset + k) == 0.0 ? 1 : 0;
  return n;
}

ad::Matrix SampleBatch::visibility() const { return inputs.middleCols(kVisibilityOffset, kParts); }

// -------------------------------------------------------------- generation

std::vector<bool> sample_occlusion(const body::Skeleton& sk, double rate, int max_run, Rng& rng) {
  const int n = sk.parts();
  std::vector<bool> mask(static_cast<std::size_t>(n), false);
  int target = 0;
  for (int k = 0; k < n; ++k) target += rng.uniform() < rate ? 1 : 0;
  if (target == 0) return mask;
  const auto ch = children_of(sk);
  int done = 0;
  while (done < target) {
    std::vector<int> free;
    for (int k = 0; k < n; ++k)
      if (!mask[static_cast<std::size_t>(k)]) free.push_back(k);
    int at = free[static_cast<std::size_t>(rng.below(free.size()))];
    const int len = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_run)));
    for (int step = 0; step < len && done < target; ++step) {
      mask[static_cast<std::size_t>(at)] = true;
      ++done;
      std::vector<int> next;
      for (int c : ch[static_cast<std::size_t>(at)])
        if (!mask[static_cast<std::size_t>(c)]) next.push_back(c);
      if (next.empty()) break;
      at = next[static_cast<std::size_t>(rng.below(next.size()))];
    }
  }
  return mask;
}

void render_inputs(SampleBatch& batch, Eigen::Index i, const SourceSpec& spec, Rng& rng) {
  render_with(batch, i, spec.keypoint_noise, spec.occlusion_rate, spec.max_run, rng);
}

SampleBatch generate(const SourceSpec& spec, int n, std::uint64_t seed, int source_id) {
  if (n <= 0) throw std::invalid_argument("generate needs n > 0");
  spec.validate();
  SampleBatch b = allocate(n);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < n; ++i) {
    sample_params(spec, b, i, rng);
    attach_joints(b, i);
    render_inputs(b, i, spec, rng);
    b.source[static_cast<std::size_t>(i)] = source_id;
  }
  return b;
}

body::Vec3 slerp_axis_angle(const body::Vec3& a, const body::Vec3& b, double t) {
  auto to_quat = [](const body::Vec3& w) {
    const double angle = w.norm();
    if (angle < 1e-15) return Eigen::Quaterniond::Identity();
    return Eigen::Quaterniond(Eigen::AngleAxisd(angle, w / angle));
  };
  const Eigen::Quaterniond q = to_quat(a).slerp(t, to_quat(b));
  const Eigen::AngleAxisd aa(q);
  return body::canonicalize(aa.angle() * aa.axis());
}

Sequence make_sequence(const SourceSpec& spec, const SequenceSpec& seq, int frames, int n_keyframes,
                       std::uint64_t seed) {
  if (frames < 2) throw std::invalid_argument("sequence needs at least 2 frames");
  if (n_keyframes < 2 || n_keyframes > frames) throw std::invalid_argument("need 2 <= keyframes <= frames");
  if (seq.window_length < 0 || seq.window_length > frames) throw std::invalid_argument("bad occlusion window length");
  spec.validate();
  Rng rng(seed);
  SampleBatch keys = allocate(n_keyframes);
  for (Eigen::Index k = 0; k < n_keyframes; ++k) sample_params(spec, keys, k, rng);

  Sequence out;
  out.frames = allocate(frames);
  for (int k = 0; k < n_keyframes; ++k)
    out.keyframes.push_back(static_cast<int>(std::lround(static_cast<double>(k) * (frames - 1) / (n_keyframes - 1))));

  for (int f = 0; f < frames; ++f) {
    int seg = 0;
    while (seg + 1 < n_keyframes - 1 && f > out.keyframes[static_cast<std::size_t>(seg + 1)]) ++seg;
    const int f0 = out.keyframes[static_cast<std::size_t>(seg)];
    const int f1 = out.keyframes[static_cast<std::size_t>(seg + 1)];
    const double t = f1 == f0 ? 0.0 : static_cast<double>(f - f0) / (f1 - f0);
    for (int p = 0; p < kParts; ++p) {
      const body::Vec3 a = keys.pose.row(seg).segment<3>(3 * p).transpose();
      const body::Vec3 b = keys.pose.row(seg + 1).segment<3>(3 * p).transpose();
      out.frames.pose.row(f).segment<3>(3 * p) = slerp_axis_angle(a, b, t).transpose();
    }
    out.frames.shape.row(f) = keys.shape.row(0);
    out.frames.camera.row(f) = keys.camera.row(0);
    attach_joints(out.frames, f);
  }

  out.degraded.assign(static_cast<std::size_t>(frames), false);
  if (seq.window_length > 0) {
    // Keep the window off the sequence ends when there is room.
    const int room = frames - seq.window_length;
    const int start = room >= 2 ? 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(room - 1)))
                                : static_cast<int>(rng.below(static_cast<std::uint64_t>(room + 1)));
    for (int f = start; f < start + seq.window_length; ++f) out.degraded[static_cast<std::size_t>(f)] = true;
  }
  for (int f = 0; f < frames; ++f) {
    if (out.degraded[static_cast<std::size_t>(f)])
      render_with(out.frames, f, seq.window_noise, seq.window_occlusion_rate, spec.max_run, rng);
    else
      render_inputs(out.frames, f, spec, rng);
  }
  return out;
}

// ------------------------------------------------------------- BatchStream

BatchStream::BatchStream(std::vector<const SampleBatch*> sources, std::vector<double> ratios, int batch_size,
                         std::uint64_t seed)
    : sources_(std::move(sources)), batch_size_(batch_size), seed_(seed), rng_(derive_seed(seed, "stream")) {
  if (sources_.empty() || sources_.size() != ratios.size())
    throw std::invalid_argument("mix needs one ratio per source");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  const double total = std::accumulate(ratios.begin(), ratios.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("mix ratios must sum to 1");
  double acc = 0.0;
  for (std::size_t s = 0; s < ratios.size(); ++s) {
    if (ratios[s] < 0.0) throw std::invalid_argument("mix ratios must be nonnegative");
    if (ratios[s] > 0.0 && (sources_[s] == nullptr || sources_[s]->size() == 0))
      throw std::invalid_argument("source " + std::to_string(s) + " is empty but has a positive ratio");
    acc += ratios[s];
    cumulative_.push_back(acc);
  }
  order_.resize(sources_.size());
  cursor_.assign(sources_.size(), 0);
  epoch_.assign(sources_.size(), 0);
  for (std::size_t s = 0; s < sources_.size(); ++s)
    if (sources_[s] != nullptr && sources_[s]->size() > 0) reshuffle(s);
}

void BatchStream::reshuffle(std::size_t s) {
  const Eigen::Index n = sources_[s]->size();
  auto& ord = order_[s];
  ord.resize(static_cast<std::size_t>(n));
  std::iota(ord.begin(), ord.end(), Eigen::Index{0});
  Rng r(derive_seed(seed_, "epoch", s * 1000003ULL + epoch_[s]));
  for (std::size_t i = ord.size(); i > 1; --i) std::swap(ord[i - 1], ord[static_cast<std::size_t>(r.below(i))]);
  cursor_[s] = 0;
}

SampleBatch BatchStream::next() {
  std::vector<Eigen::Index> picks;
  std::vector<std::size_t> from;
  last_sources_.clear();
  for (int k = 0; k < batch_size_; ++k) {
    const double u = rng_.uniform() * cumulative_.back();
    std::size_t s = 0;
    while (s + 1 < cumulative_.size() && u >= cumulative_[s]) ++s;
    if (cursor_[s] >= order_[s].size()) {
      ++epoch_[s];
      reshuffle(s);
    }
    picks.push_back(order_[s][cursor_[s]++]);
    from.push_back(s);
    last_sources_.push_back(static_cast<int>(s));
  }
  SampleBatch out = allocate(batch_size_);
  for (int k = 0; k < batch_size_; ++k) {
    const SampleBatch& src = *sources_[from[static_cast<std::size_t>(k)]];
    const std::array<Eigen::Index, 1> row{picks[static_cast<std::size_t>(k)]};
    const SampleBatch one = src.subset(row);
    out.inputs.row(k) = one.inputs.row(0);
    out.pose.row(k) = one.pose.row(0);
    out.shape.row(k) = one.shape.row(0);
    out.camera.row(k) = one.camera.row(0);
    out.joints3d.row(k) = one.joints3d.row(0);
    out.joints2d.row(k) = one.joints2d.row(0);
    out.source[static_cast<std::size_t>(k)] = one.source[0];
  }
  return out;
}

std::string BatchStream::state() const {
  std::ostringstream os;
  os << rng_.state() << '\n' << sources_.size();
  for (std::size_t s = 0; s < sources_.size(); ++s) os << ' ' << epoch_[s] << ' ' << cursor_[s];
  return os.str();
}

void BatchStream::set_state(const std::string& text) {
  std::istringstream is(text);
  std::string rng_line;
  std::getline(is, rng_line);
  rng_.set_state(rng_line);
  std::size_t n = 0;
  is >> n;
  if (n != sources_.size()) throw std::runtime_error("stream state has wrong source count");
  for (std::size_t s = 0; s < n; ++s) {
    is >> epoch_[s] >> cursor_[s];
    if (sources_[s] != nullptr && sources_[s]->size() > 0) {
      const std::size_t keep = cursor_[s];
      reshuffle(s);
      cursor_[s] = keep;
    }
  }
  if (!is) throw std::runtime_error("malformed stream state");
}

// ----------------------------------------------------------------- file I/O

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
  return v;
}

void put_f32_array(std::ostream& os, const ad::Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const auto f = static_cast<float>(m.data()[i]);
    put_u32(os, std::bit_cast<std::uint32_t>(f));
  }
}

void get_f32_array(std::istream& is, ad::Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(std::bit_cast<float>(get_u32(is)));
}

}  // namespace

void write_dataset(const std::filesystem::path& path, const SampleBatch& b) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write("CRDS", 4);
  put_u32(os, kDatasetVersion);
  put_u32(os, static_cast<std::uint32_t>(b.size()));
  put_u32(os, kInputDim);
  put_u32(os, body::kParts);
  put_u32(os, body::kShapeDim);
  put_f32_array(os, b.inputs);
  put_f32_array(os, b.pose);
  put_f32_array(os, b.shape);
  put_f32_array(os, b.camera);
  put_f32_array(os, b.joints3d);
  put_f32_array(os, b.joints2d);
  ad::Matrix src(1, b.size());
  for (Eigen::Index i = 0; i < b.size(); ++i) src(0, i) = b.source[static_cast<std::size_t>(i)];
  put_f32_array(os, src);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

SampleBatch read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CRDS", 4) != 0) throw std::runtime_error("not a CRDS dataset: " + path.string());
  const std::uint32_t version = get_u32(is);
  if (version != kDatasetVersion) throw std::runtime_error("unsupported dataset version " + std::to_string(version));
  const std::uint32_t n = get_u32(is);
  const std::uint32_t in_dim = get_u32(is);
  const std::uint32_t parts = get_u32(is);
  const std::uint32_t shape_dim = get_u32(is);
  if (in_dim != kInputDim || parts != body::kParts || shape_dim != body::kShapeDim)
    throw std::runtime_error("dataset layout mismatch in " + path.string());
  SampleBatch b = allocate(n);
  get_f32_array(is, b.inputs);
  get_f32_array(is, b.pose);
  get_f32_array(is, b.shape);
  get_f32_array(is, b.camera);
  get_f32_array(is, b.joints3d);
  get_f32_array(is, b.joints2d);
  ad::Matrix src(1, n);
  get_f32_array(is, src);
  if (!is) throw std::runtime_error("truncated dataset " + path.string());
  for (std::uint32_t i = 0; i < n; ++i) b.source[i] = static_cast<int>(src(0, i));
  return b;
}

}  // namespace poco::data
