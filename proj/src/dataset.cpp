#include "dwmlab/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <nlohmann/json.hpp>

#include "dwmlab/checkpoint.hpp"
#include "dwmlab/errors.hpp"
#include "dwmlab/log.hpp"

namespace dwmlab {

double compute_rtg(std::span<const double> rewards, std::size_t t, double gamma, double reward_scale) {
  double sum = 0.0, discount = 1.0;
  for (std::size_t j = t; j < rewards.size(); ++j) {
    sum += discount * rewards[j];
    discount *= gamma;
  }
  return sum / reward_scale;
}

std::vector<double> rtg_labels(const Trajectory& traj, double gamma, double reward_scale) {
  const std::size_t L = traj.length();
  std::vector<double> out(L);
  double g = 0.0;
  for (std::size_t t = L; t-- > 0;) {
    g = traj.rewards[t] + gamma * g;
    out[t] = g / reward_scale;
  }
  return out;
}

RtgMode rtg_mode_from_string(const std::string& s) {
  if (s == "episode") return RtgMode::episode;
  if (s == "window") return RtgMode::window;
  throw ConfigError("unknown rtg mode '" + s + "'");
}

std::string to_string(RtgMode m) { return m == RtgMode::episode ? "episode" : "window"; }

void Normalizer::apply_obs(std::span<const double> in, std::span<double> out) const {
  for (std::size_t d = 0; d < in.size(); ++d) out[d] = obs_active ? (in[d] - obs_mean[d]) / obs_std[d] : in[d];
}

void Normalizer::invert_obs(std::span<const double> in, std::span<double> out) const {
  for (std::size_t d = 0; d < in.size(); ++d) out[d] = obs_active ? in[d] * obs_std[d] + obs_mean[d] : in[d];
}

std::vector<double> Normalizer::apply_obs(std::span<const double> in) const {
  std::vector<double> out(in.size());
  apply_obs(in, out);
  return out;
}

std::vector<double> Normalizer::invert_obs(std::span<const double> in) const {
  std::vector<double> out(in.size());
  invert_obs(in, out);
  return out;
}

Normalizer fit_normalizer(std::span<const Trajectory> trajectories, std::size_t state_dim) {
  if (trajectories.empty()) throw ConfigError("fit_normalizer: empty dataset");
  Normalizer n;
  n.obs_mean.assign(state_dim, 0.0);
  n.obs_std.assign(state_dim, 0.0);
  std::size_t count = 0;
  double rsum = 0.0;
  for (const auto& tr : trajectories) {
    for (std::size_t t = 0; t < tr.length(); ++t) {
      for (std::size_t d = 0; d < state_dim; ++d) n.obs_mean[d] += tr.states[t * state_dim + d];
      rsum += tr.rewards[t];
    }
    count += tr.length();
  }
  if (count == 0) throw ConfigError("fit_normalizer: dataset has no transitions");
  for (double& m : n.obs_mean) m /= static_cast<double>(count);
  n.reward_mean = rsum / static_cast<double>(count);
  double rvar = 0.0;
  for (const auto& tr : trajectories) {
    for (std::size_t t = 0; t < tr.length(); ++t) {
      for (std::size_t d = 0; d < state_dim; ++d) {
        const double c = tr.states[t * state_dim + d] - n.obs_mean[d];
        n.obs_std[d] += c * c;
      }
      const double c = tr.rewards[t] - n.reward_mean;
      rvar += c * c;
    }
  }
  for (std::size_t d = 0; d < state_dim; ++d) {
    n.obs_std[d] = std::sqrt(n.obs_std[d] / static_cast<double>(count));
    if (!(n.obs_std[d] >= Normalizer::kStdFloor)) {
      log::warn("normalizer: observation dimension " + std::to_string(d) + " has ~zero variance; std floored");
      n.obs_std[d] = Normalizer::kStdFloor;
      n.floored_dims.push_back(d);
    }
  }
  n.reward_std = std::sqrt(rvar / static_cast<double>(count));
  if (!(n.reward_std >= Normalizer::kStdFloor)) {
    log::warn("normalizer: reward has ~zero variance; std floored");
    n.reward_std = Normalizer::kStdFloor;
  }
  return n;
}

std::size_t OfflineDataset::transition_count() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.length();
  return n;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

namespace {

void quantize(std::vector<double>& v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

}  // namespace

OfflineDataset make_dataset(std::string env, std::string tier, double gamma, std::uint64_t seed,
                            std::vector<Trajectory> trajectories) {
  if (trajectories.empty()) throw ConfigError("make_dataset: no trajectories");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("make_dataset: gamma must lie in (0, 1)");
  OfflineDataset d;
  d.env = std::move(env);
  d.tier = std::move(tier);
  d.gamma = gamma;
  d.seed = seed;
  d.state_dim = trajectories.front().state_dim;
  d.action_dim = trajectories.front().action_dim;
  const std::size_t L = trajectories.front().length();
  for (auto& t : trajectories) {
    if (t.state_dim != d.state_dim || t.action_dim != d.action_dim || t.length() != L)
      throw ConfigError("make_dataset: trajectories disagree on shape");
    if (t.states.size() != L * t.state_dim || t.actions.size() != L * t.action_dim)
      throw ConfigError("make_dataset: trajectory arrays have inconsistent lengths");
    quantize(t.states);
    quantize(t.actions);
    quantize(t.rewards);
    for (double r : t.rewards)
      if (!std::isfinite(r)) throw NumericalError("make_dataset: non-finite reward");
  }
  d.trajectories = std::move(trajectories);
  d.normalizer = fit_normalizer(d.trajectories, d.state_dim);
  std::vector<double> returns;
  returns.reserve(d.trajectories.size());
  for (const auto& t : d.trajectories) returns.push_back(compute_rtg(t.rewards, 0, gamma, 1.0));
  d.reward_scale = percentile(returns, 95.0);
  if (!(d.reward_scale > 0.0)) throw NumericalError("make_dataset: non-positive reward scale");
  return d;
}

OfflineDataset generate_dataset(const EnvSpec& spec, const std::string& tier, std::size_t episodes,
                                double gamma, std::uint64_t seed) {
  std::vector<PolicyLevel> cycle;
  if (tier == "random") cycle = {PolicyLevel::random};
  else if (tier == "medium") cycle = {PolicyLevel::medium};
  else if (tier == "expert") cycle = {PolicyLevel::expert};
  else if (tier == "medium-replay") cycle = {PolicyLevel::random, PolicyLevel::medium};
  else if (tier == "medium-expert") cycle = {PolicyLevel::medium, PolicyLevel::expert};
  else throw ConfigError("unknown dataset tier '" + tier + "'");
  if (episodes == 0) throw ConfigError("generate_dataset: episodes must be positive");

  std::vector<Trajectory> trajs;
  trajs.reserve(episodes);
  for (std::size_t i = 0; i < episodes; ++i) {
    ScriptedPolicy policy(spec, cycle[i % cycle.size()], derive_seed(seed, 2 * i + 1));
    trajs.push_back(rollout(spec, policy, derive_seed(seed, 2 * i), spec.episode_length));
  }
  return make_dataset(spec.name, tier, gamma, seed, std::move(trajs));
}

std::vector<double> make_window(const OfflineDataset& data, std::size_t traj_index, std::size_t t,
                                std::size_t horizon) {
  const Trajectory& tr = data.trajectories.at(traj_index);
  if (t + horizon > tr.length()) throw std::out_of_range("make_window: window crosses episode end");
  WindowLayout lay{data.state_dim, data.action_dim, horizon};
  std::vector<double> x(lay.dim());
  const Normalizer& n = data.normalizer;
  n.apply_obs(tr.state(t), std::span<double>(x.data(), data.state_dim));
  std::copy(tr.action(t).begin(), tr.action(t).end(), x.begin() + static_cast<long>(data.state_dim));
  for (std::size_t h = 0; h < horizon; ++h) {
    x[lay.reward_offset(h)] = n.apply_reward(tr.rewards[t + h]);
    if (h > 0) n.apply_obs(tr.state(t + h), std::span<double>(x.data() + lay.state_offset(h), data.state_dim));
  }
  return x;
}

double window_rtg(const OfflineDataset& data, std::size_t traj_index, std::size_t t, std::size_t horizon,
                  RtgMode mode) {
  const Trajectory& tr = data.trajectories.at(traj_index);
  if (mode == RtgMode::episode) return compute_rtg(tr.rewards, t, data.gamma, data.reward_scale);
  std::span<const double> r(tr.rewards.data(), std::min(tr.length(), t + horizon));
  return compute_rtg(r, t, data.gamma, data.reward_scale);
}

WindowBatch sample_windows(const OfflineDataset& data, std::size_t horizon, std::size_t batch, Rng& rng,
                           RtgMode mode) {
  const std::size_t L = data.episode_length();
  if (horizon == 0 || horizon > L) throw ConfigError("sample_windows: window length T must lie in [1, L]");
  if (batch == 0) throw ConfigError("sample_windows: batch must be positive");
  WindowBatch wb;
  wb.layout = {data.state_dim, data.action_dim, horizon};
  wb.x0.resize(batch, wb.layout.dim());
  wb.rtg.resize(batch);
  wb.traj.resize(batch);
  wb.start.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t i = rng.index(data.trajectories.size());
    const std::size_t t = rng.index(L - horizon + 1);
    const auto x = make_window(data, i, t, horizon);
    std::copy(x.begin(), x.end(), wb.x0.row(b).begin());
    wb.rtg[b] = window_rtg(data, i, t, horizon, mode);
    wb.traj[b] = i;
    wb.start[b] = t;
  }
  return wb;
}

// ---------------------------------------------------------------- persistence

nlohmann::json normalizer_to_json(const Normalizer& n) {
  return {{"obs_mean", n.obs_mean},           {"obs_std", n.obs_std},
          {"reward_mean", n.reward_mean},     {"reward_std", n.reward_std},
          {"obs_active", n.obs_active},       {"reward_active", n.reward_active},
          {"floored_dims", n.floored_dims}};
}

Normalizer normalizer_from_json(const nlohmann::json& j) {
  Normalizer n;
  n.obs_mean = j.at("obs_mean").get<std::vector<double>>();
  n.obs_std = j.at("obs_std").get<std::vector<double>>();
  n.reward_mean = j.at("reward_mean").get<double>();
  n.reward_std = j.at("reward_std").get<double>();
  n.obs_active = j.at("obs_active").get<bool>();
  n.reward_active = j.at("reward_active").get<bool>();
  n.floored_dims = j.at("floored_dims").get<std::vector<std::size_t>>();
  return n;
}

namespace {

constexpr char kMagic[6] = {'D', 'W', 'M', 'T', '1', '\n'};

std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

void save_dataset(const std::filesystem::path& path, const OfflineDataset& data) {
  const std::size_t L = data.episode_length();
  std::string payload;
  payload.reserve(data.trajectories.size() * L * (data.state_dim + data.action_dim + 1) * 4);
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> tags;
  for (const auto& tr : data.trajectories) {
    for (double v : tr.states) io::write_f32(payload, static_cast<float>(v));
    for (double v : tr.actions) io::write_f32(payload, static_cast<float>(v));
    for (double v : tr.rewards) io::write_f32(payload, static_cast<float>(v));
    seeds.push_back(tr.seed);
    tags.push_back(tr.policy_tag);
  }
  nlohmann::json header = {
      {"format", "DWMT1"},
      {"version", kDatasetVersion},
      {"env", data.env},
      {"tier", data.tier},
      {"gamma", data.gamma},
      {"reward_scale", data.reward_scale},
      {"normalizer", normalizer_to_json(data.normalizer)},
      {"counts",
       {{"trajectories", data.trajectories.size()},
        {"episode_length", L},
        {"state_dim", data.state_dim},
        {"action_dim", data.action_dim},
        {"payload_bytes", payload.size()}}},
      {"seed", data.seed},
      {"trajectory_seeds", seeds},
      {"policy_tags", tags},
  };
  const std::string text = header.dump();
  std::string bytes(kMagic, sizeof kMagic);
  io::write_u32(bytes, static_cast<std::uint32_t>(text.size()));
  bytes += text;
  io::write_u32(bytes, crc32_of(payload.data(), payload.size()));
  bytes += payload;
  io::write_file(path, bytes);
}

OfflineDataset load_dataset(const std::filesystem::path& path) {
  using K = FormatError::Kind;
  if (!std::filesystem::exists(path)) throw MissingArtifactError("dataset not found: " + path.string());
  const std::string bytes = io::read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < sizeof kMagic + 4) throw FormatError(K::truncated, "dataset file truncated before header");
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw FormatError(K::bad_magic, "not a DWMT1 dataset: " + path.string());
  const std::size_t header_len = io::read_u32(p + sizeof kMagic);
  const std::size_t header_start = sizeof kMagic + 4;
  if (header_start + header_len + 4 > bytes.size()) throw FormatError(K::truncated, "dataset header truncated");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(header_start, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(K::malformed_header, std::string("dataset header is not JSON: ") + e.what());
  }

  OfflineDataset d;
  std::size_t n_traj = 0, L = 0, payload_bytes = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> tags;
  try {
    if (h.value("format", std::string{}) != "DWMT1" || h.value("version", -1) != kDatasetVersion)
      throw FormatError(K::version_mismatch, "dataset version mismatch: expected DWMT1 v" +
                                                 std::to_string(kDatasetVersion) + " in " + path.string());
    d.env = h.at("env").get<std::string>();
    d.tier = h.at("tier").get<std::string>();
    d.gamma = h.at("gamma").get<double>();
    d.reward_scale = h.at("reward_scale").get<double>();
    d.normalizer = normalizer_from_json(h.at("normalizer"));
    d.seed = h.at("seed").get<std::uint64_t>();
    const auto& c = h.at("counts");
    n_traj = c.at("trajectories").get<std::size_t>();
    L = c.at("episode_length").get<std::size_t>();
    d.state_dim = c.at("state_dim").get<std::size_t>();
    d.action_dim = c.at("action_dim").get<std::size_t>();
    payload_bytes = c.at("payload_bytes").get<std::size_t>();
    seeds = h.at("trajectory_seeds").get<std::vector<std::uint64_t>>();
    tags = h.at("policy_tags").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(K::malformed_header, std::string("dataset header: ") + e.what());
  }

  const std::size_t per_traj = L * (d.state_dim + d.action_dim + 1) * 4;
  const std::size_t payload_start = header_start + header_len + 4;
  const std::size_t actual = bytes.size() - payload_start;
  if (actual < payload_bytes)
    throw FormatError(K::truncated, "dataset payload truncated: " + std::to_string(actual) + " of " +
                                        std::to_string(payload_bytes) + " bytes present");
  if (per_traj * n_traj != payload_bytes || actual != payload_bytes || seeds.size() != n_traj ||
      tags.size() != n_traj)
    throw FormatError(K::count_mismatch, "dataset counts disagree with payload: header implies " +
                                             std::to_string(per_traj * n_traj) + " bytes, declares " +
                                             std::to_string(payload_bytes) + ", file holds " +
                                             std::to_string(actual));
  const std::uint32_t stored_crc = io::read_u32(p + header_start + header_len);
  if (crc32_of(bytes.data() + payload_start, actual) != stored_crc)
    throw FormatError(K::checksum_mismatch, "dataset payload checksum mismatch in " + path.string());

  const unsigned char* cur = p + payload_start;
  auto read_block = [&cur](std::vector<double>& out, std::size_t n) {
    out.resize(n);
    for (double& v : out) {
      v = static_cast<double>(io::read_f32(cur));
      cur += 4;
    }
  };
  d.trajectories.resize(n_traj);
  for (std::size_t i = 0; i < n_traj; ++i) {
    Trajectory& tr = d.trajectories[i];
    tr.state_dim = d.state_dim;
    tr.action_dim = d.action_dim;
    read_block(tr.states, L * d.state_dim);
    read_block(tr.actions, L * d.action_dim);
    read_block(tr.rewards, L);
    tr.seed = seeds[i];
    tr.policy_tag = tags[i];
  }
  return d;
}

}  // namespace dwmlab
