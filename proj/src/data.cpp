#include "sae/data.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "sae/errors.hpp"
#include "sae/tensor_file.hpp"

namespace sae {

namespace {

constexpr std::uint32_t kActivationVersion = 1;
constexpr std::uint32_t kDtypeF32 = 1;
constexpr std::size_t kActivationHeaderBytes = 24;

// Stream tags for derive_seed.
constexpr std::uint64_t kDictionaryStream = 1;
constexpr std::uint64_t kSampleStream = 2;

}  // namespace

void SyntheticSpec::validate() const {
  if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
  if (n_true_features < 1) throw ConfigError("n_true_features must be >= 1");
  if (!(feature_sparsity >= 0.0 && feature_sparsity <= 1.0)) {
    throw ConfigError("feature_sparsity must lie in [0, 1], got " + std::to_string(feature_sparsity));
  }
  if (!(decay >= 0.0 && decay <= 1.0)) {
    throw ConfigError("decay must lie in [0, 1], got " + std::to_string(decay));
  }
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
    throw ConfigError("noise_std must be finite and >= 0, got " + std::to_string(noise_std));
  }
}

std::string SyntheticSpec::to_json() const {
  nlohmann::ordered_json j;
  j["input_dim"] = input_dim;
  j["n_true_features"] = n_true_features;
  j["feature_sparsity"] = feature_sparsity;
  j["decay"] = decay;
  j["noise_std"] = noise_std;
  j["seed"] = seed;
  return j.dump();
}

SyntheticSpec SyntheticSpec::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  SyntheticSpec spec;
  spec.input_dim = j.at("input_dim").get<std::size_t>();
  spec.n_true_features = j.at("n_true_features").get<std::size_t>();
  spec.feature_sparsity = j.at("feature_sparsity").get<double>();
  spec.decay = j.at("decay").get<double>();
  spec.noise_std = j.at("noise_std").get<double>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  return spec;
}

GroundTruth make_ground_truth(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, kDictionaryStream));
  GroundTruth truth;
  truth.dictionary = gaussian_sample(rng, spec.input_dim, spec.n_true_features);
  normalize_columns(truth.dictionary);
  truth.activation_prob.resize(spec.n_true_features);
  for (std::size_t j = 0; j < spec.n_true_features; ++j) {
    truth.activation_prob[j] = spec.feature_sparsity * std::pow(spec.decay, static_cast<double>(j));
  }
  return truth;
}

ActivationStore::ActivationStore(std::size_t dim, std::vector<float> payload)
    : dim_(dim), payload_(std::move(payload)) {
  if (dim_ == 0 || payload_.size() % dim_ != 0) {
    throw DimensionError("ActivationStore: payload of " + std::to_string(payload_.size()) +
                         " values is not a whole number of " + std::to_string(dim_) + "-dim rows");
  }
}

ActivationStore ActivationStore::from_matrix(const Matrix& rows) {
  std::vector<float> payload(rows.size());
  std::transform(rows.values().begin(), rows.values().end(), payload.begin(),
                 [](double v) { return static_cast<float>(v); });
  return ActivationStore(rows.cols(), std::move(payload));
}

Matrix ActivationStore::rows(std::size_t begin, std::size_t n) const {
  if (begin + n > count()) throw DimensionError("ActivationStore::rows: range past end");
  Matrix out(n, dim_);
  const float* src = payload_.data() + begin * dim_;
  std::copy(src, src + n * dim_, out.data());
  return out;
}

Matrix ActivationStore::gather(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), dim_);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= count()) throw DimensionError("ActivationStore::gather: index past end");
    const auto src = row(indices[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

SyntheticGenerator::SyntheticGenerator(const SyntheticSpec& spec, const GroundTruth& truth,
                                       std::uint64_t stream_seed)
    : spec_(spec), truth_(truth), rng_(stream_seed) {
  spec_.validate();
  if (truth.input_dim() != spec.input_dim || truth.n_features() != spec.n_true_features) {
    throw DimensionError("SyntheticGenerator: ground truth does not match spec");
  }
}

SparseCode SyntheticGenerator::draw_code(std::span<const Clamp> clamps) {
  const std::size_t n = truth_.n_features();
  if (!clamps.empty() && clamps.size() != n) {
    throw DimensionError("draw_code: clamp vector must have one entry per true feature");
  }
  SparseCode code;
  for (std::size_t j = 0; j < n; ++j) {
    // Always consume the Bernoulli draw so clamping one feature does not
    // shift the random stream of the others.
    bool active = rng_.bernoulli(truth_.activation_prob[j]);
    if (!clamps.empty() && clamps[j] != Clamp::Free) active = clamps[j] == Clamp::On;
    if (active) {
      code.features.push_back(j);
      code.amplitudes.push_back(rng_.uniform(0.5, 1.5));
    }
  }
  return code;
}

std::vector<double> SyntheticGenerator::render(const SparseCode& code) {
  const std::size_t d = truth_.input_dim();
  std::vector<double> x(d, 0.0);
  for (std::size_t s = 0; s < code.features.size(); ++s) {
    const std::size_t j = code.features[s];
    const double a = code.amplitudes[s];
    for (std::size_t r = 0; r < d; ++r) x[r] += a * truth_.dictionary(r, j);
  }
  if (spec_.noise_std > 0.0) {
    for (double& v : x) v += spec_.noise_std * rng_.normal();
  }
  return x;
}

std::vector<double> compose_sample(const GroundTruth& truth, std::span<const double> coefficients) {
  if (coefficients.size() != truth.n_features()) {
    throw DimensionError("compose_sample: need one coefficient per true feature");
  }
  std::vector<double> x(truth.input_dim(), 0.0);
  for (std::size_t j = 0; j < coefficients.size(); ++j) {
    if (coefficients[j] == 0.0) continue;
    for (std::size_t r = 0; r < x.size(); ++r) x[r] += coefficients[j] * truth.dictionary(r, j);
  }
  return x;
}

SyntheticData generate_synthetic(const SyntheticSpec& spec, std::size_t n_samples) {
  if (n_samples < 1) throw ConfigError("generate_synthetic: n_samples must be >= 1");
  SyntheticData out;
  out.truth = make_ground_truth(spec);
  SyntheticGenerator gen(spec, out.truth, derive_seed(spec.seed, kSampleStream));
  std::vector<float> payload;
  payload.reserve(n_samples * spec.input_dim);
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (double v : gen.render(gen.draw_code())) payload.push_back(static_cast<float>(v));
  }
  out.store = ActivationStore(spec.input_dim, std::move(payload));
  return out;
}

std::vector<std::uint8_t> encode_activations(const ActivationStore& store) {
  std::vector<std::uint8_t> out = {'S', 'A', 'E', 'A'};
  out.reserve(kActivationHeaderBytes + store.payload().size() * 4);
  le::put_u32(out, kActivationVersion);
  le::put_u32(out, kDtypeF32);
  le::put_u32(out, static_cast<std::uint32_t>(store.dim()));
  le::put_u64(out, store.count());
  for (float v : store.payload()) {
    if (!std::isfinite(v)) throw NumericalError("write_activations: non-finite value in store");
    le::put_f32(out, v);
  }
  return out;
}

ActivationStore decode_activations(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kActivationHeaderBytes) {
    throw FormatError(FormatErrorKind::Truncated,
                      "header needs " + std::to_string(kActivationHeaderBytes) + " bytes, file has " +
                          std::to_string(bytes.size()));
  }
  const std::uint8_t* p = bytes.data();
  if (!(p[0] == 'S' && p[1] == 'A' && p[2] == 'E' && p[3] == 'A')) {
    throw FormatError(FormatErrorKind::BadMagic, "not an SAEA activation file");
  }
  const std::uint32_t version = le::get_u32(p + 4);
  if (version != kActivationVersion) {
    throw FormatError(FormatErrorKind::BadVersion, "version " + std::to_string(version) +
                                                       " (supported: 1)");
  }
  const std::uint32_t dtype = le::get_u32(p + 8);
  if (dtype != kDtypeF32) {
    throw FormatError(FormatErrorKind::BadDtype, "dtype tag " + std::to_string(dtype) +
                                                     " (supported: 1 = f32)");
  }
  const std::uint64_t d = le::get_u32(p + 12);
  const std::uint64_t n = le::get_u64(p + 16);
  if (d == 0) throw FormatError(FormatErrorKind::DimMismatch, "header declares d = 0");

  const std::uint64_t available = bytes.size() - kActivationHeaderBytes;
  const bool overflow = n > UINT64_MAX / 4 / d;
  const std::uint64_t expected = overflow ? UINT64_MAX : n * d * 4;
  if (available < expected) {
    throw FormatError(FormatErrorKind::Truncated,
                      "expected " + std::to_string(expected) + " payload bytes for n=" +
                          std::to_string(n) + ", d=" + std::to_string(d) + ", found " +
                          std::to_string(available));
  }
  if (available > expected) {
    throw FormatError(FormatErrorKind::DimMismatch,
                      "payload has " + std::to_string(available) + " bytes, header implies " +
                          std::to_string(expected));
  }
  std::vector<float> payload(n * d);
  const std::uint8_t* src = p + kActivationHeaderBytes;
  for (std::size_t i = 0; i < payload.size(); ++i) {
    payload[i] = le::get_f32(src + 4 * i);
    if (!std::isfinite(payload[i])) {
      throw FormatError(FormatErrorKind::BadSection,
                        "non-finite value in row " + std::to_string(i / d));
    }
  }
  return ActivationStore(d, std::move(payload));
}

void write_activations(const ActivationStore& store, const std::filesystem::path& path) {
  write_file_bytes(path, encode_activations(store));
}

ActivationStore read_activations(const std::filesystem::path& path) {
  return decode_activations(read_file_bytes(path));
}

void write_ground_truth(const GroundTruth& truth, const SyntheticSpec& spec,
                        const std::filesystem::path& path) {
  TensorFile file("SAEG");
  file.put_text("spec", spec.to_json());
  file.put_matrix("dictionary", truth.dictionary);
  file.put_matrix("activation_prob",
                  Matrix(1, truth.activation_prob.size(), truth.activation_prob));
  file.write(path);
}

GroundTruthFile read_ground_truth(const std::filesystem::path& path) {
  const TensorFile file = TensorFile::read("SAEG", path);
  GroundTruthFile out;
  try {
    out.spec = SyntheticSpec::from_json(file.get_text("spec"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::BadSection, std::string("section 'spec': ") + e.what());
  }
  out.truth.dictionary = file.get_matrix("dictionary");
  const Matrix prob = file.get_matrix("activation_prob");
  out.truth.activation_prob.assign(prob.values().begin(), prob.values().end());
  if (out.truth.dictionary.rows() != out.spec.input_dim ||
      out.truth.dictionary.cols() != out.spec.n_true_features ||
      out.truth.activation_prob.size() != out.spec.n_true_features) {
    throw FormatError(FormatErrorKind::DimMismatch, "ground-truth sections disagree with spec");
  }
  return out;
}

ShuffleBuffer::ShuffleBuffer(std::size_t begin, std::size_t end, std::size_t capacity,
                             std::size_t batch, std::uint64_t seed)
    : begin_(begin), end_(end), capacity_(capacity), batch_(batch), cursor_(begin), rng_(seed) {
  if (batch < 1) throw ConfigError("shuffle buffer: batch must be >= 1");
  if (batch > capacity) {
    throw ConfigError("shuffle buffer: batch " + std::to_string(batch) + " exceeds capacity " +
                      std::to_string(capacity));
  }
  if (end <= begin) throw ConfigError("shuffle buffer: empty source range");
  refill_all();
}

void ShuffleBuffer::refill_all() {
  cursor_ = begin_;
  slots_.clear();
  while (slots_.size() < capacity_ && cursor_ < end_) slots_.push_back(cursor_++);
  live_ = slots_.size();
}

std::vector<std::size_t> ShuffleBuffer::next_indices() {
  if (live_ == 0) {
    refill_all();
    ++epoch_;
  }
  const std::size_t take = std::min(batch_, live_);
  for (std::size_t s = 0; s < take; ++s) {
    const std::size_t j = s + static_cast<std::size_t>(rng_.below(live_ - s));
    std::swap(slots_[s], slots_[j]);
  }
  std::vector<std::size_t> out(slots_.begin(), slots_.begin() + static_cast<std::ptrdiff_t>(take));

  std::vector<std::size_t> next;
  next.reserve(capacity_);
  for (std::size_t s = 0; s < take && cursor_ < end_; ++s) next.push_back(cursor_++);
  next.insert(next.end(), slots_.begin() + static_cast<std::ptrdiff_t>(take),
              slots_.begin() + static_cast<std::ptrdiff_t>(live_));
  slots_ = std::move(next);
  live_ = slots_.size();
  return out;
}

std::vector<std::size_t> ShuffleBuffer::contents() const {
  return {slots_.begin(), slots_.begin() + static_cast<std::ptrdiff_t>(live_)};
}

ShuffleBufferState ShuffleBuffer::state() const {
  return {slots_, live_, cursor_, epoch_, rng_.serialize()};
}

void ShuffleBuffer::restore(const ShuffleBufferState& state) {
  if (state.live > state.slots.size() || state.live > capacity_ || state.cursor < begin_ ||
      state.cursor > end_) {
    throw FormatError(FormatErrorKind::BadSection, "inconsistent shuffle buffer state");
  }
  slots_ = state.slots;
  live_ = state.live;
  cursor_ = state.cursor;
  epoch_ = state.epoch;
  rng_ = Rng::deserialize(state.rng);
}

}  // namespace sae
