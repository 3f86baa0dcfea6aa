#pragma once

#include <deque>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dart/image.hpp"
#include "dart/rng.hpp"
#include "dart/tensor.hpp"

// Toy pixel environments: 16x16x3 byte frames, deterministic under a seed,
// discrete actions. Reference scores anchor the normalized-score machinery:
// random baselines are exact where the geometry permits (Chain-8: the state
// marginal stays uniform, so expected reward per step is 1/16), Monte-Carlo
// estimates otherwise (GridCatch, KeyDoor; see tools/oracles).

namespace dart {

struct EnvSpec {
  std::string name;
  Shape obs_shape{3, 16, 16};
  int action_count = 0;
  int max_episode_len = 0;
  double random_score = 0.0;
  double expert_score = 0.0;
};

struct StepResult {
  Tensor<std::uint8_t> obs;
  float reward = 0.0f;
  bool done = false;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual Tensor<std::uint8_t> reset(std::uint64_t seed) = 0;
  virtual StepResult step(int action) = 0;
  // Privileged optimal action for the current state; defines the scripted
  // expert ("human") baseline. May use internal state a policy cannot see.
  virtual int expert_action() const = 0;

 protected:
  void check_action(int a) const {
    if (a < 0 || a >= spec().action_count)
      throw ContractError(spec().name + ": action " + std::to_string(a) + " outside [0," +
                          std::to_string(spec().action_count) + ")");
  }
  void check_not_done(bool done) const {
    if (done) throw ContractError(spec().name + ": step after episode end");
  }
};

namespace envdetail {

inline void fill_rgb(Tensor<std::uint8_t>& img, int y, int x, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const int h = img.shape[1], w = img.shape[2];
  img.data[(0 * static_cast<std::size_t>(h) + y) * w + x] = r;
  img.data[(1 * static_cast<std::size_t>(h) + y) * w + x] = g;
  img.data[(2 * static_cast<std::size_t>(h) + y) * w + x] = b;
}

}  // namespace envdetail

// A 2x2 ball block falls one row per step from a random column; the paddle
// (3 wide, center clamped to [1,14]) moves left/stay/right along the bottom
// row. The ball lands when its lower edge reaches the paddle row; caught iff
// the blocks overlap, i.e. paddle center in [col-1, col+2]. When `occluded`,
// the ball is drawn only on the initial frame, so every later frame is
// identical for equal paddle positions and the ball column must be
// remembered. Random baseline measured by the Monte-Carlo oracle over 1e6
// episodes (tools/oracles).
class GridCatchEnv : public Env {
 public:
  explicit GridCatchEnv(bool occluded = false)
      : occluded_(occluded),
        spec_{occluded ? "occludedcatch" : "gridcatch", {3, 16, 16}, 3, 14, -0.4725, 1.0} {}

  const EnvSpec& spec() const override { return spec_; }

  Tensor<std::uint8_t> reset(std::uint64_t seed) override {
    rng_ = std::make_unique<RngStream>(seed, spec_.name);
    ball_col_ = rng_->uniform_int(15);
    ball_row_ = 0;
    paddle_ = 7;
    t_ = 0;
    done_ = false;
    return render();
  }

  StepResult step(int action) override {
    check_not_done(done_);
    check_action(action);
    paddle_ += action == 0 ? -1 : (action == 2 ? 1 : 0);
    paddle_ = std::min(14, std::max(1, paddle_));
    ++ball_row_;
    ++t_;
    StepResult r;
    if (ball_row_ == 14) {
      done_ = true;
      r.reward = paddle_ >= ball_col_ - 1 && paddle_ <= ball_col_ + 2 ? 1.0f : -1.0f;
    }
    r.done = done_;
    r.obs = render();
    return r;
  }

  int expert_action() const override {
    if (paddle_ < ball_col_ - 1) return 2;
    if (paddle_ > ball_col_ + 2) return 0;
    return 1;
  }

  int ball_col() const { return ball_col_; }
  int paddle() const { return paddle_; }

 private:
  Tensor<std::uint8_t> render() const {
    Tensor<std::uint8_t> img = Tensor<std::uint8_t>::zeros({3, 16, 16});
    for (int dx = -1; dx <= 1; ++dx) envdetail::fill_rgb(img, 15, paddle_ + dx, 0, 255, 0);
    const bool ball_visible = !occluded_ || t_ == 0;
    if (ball_visible)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) envdetail::fill_rgb(img, ball_row_ + dy, ball_col_ + dx, 255, 0, 0);
    return img;
  }

  bool occluded_;
  EnvSpec spec_;
  std::unique_ptr<RngStream> rng_;
  int ball_col_ = 0, ball_row_ = 0, paddle_ = 7, t_ = 0;
  bool done_ = true;
};

// Eight states rendered as distinct solid colors; advance walks the cycle
// and pays +1 on the 7 -> 0 transition. Fixed 24-step episodes, random
// start state. Random baseline: 24 * P(state=7) * P(advance) = 24/16.
class ChainEnv : public Env {
 public:
  ChainEnv() : spec_{"chain8", {3, 16, 16}, 2, 24, 1.5, 3.0} {}

  const EnvSpec& spec() const override { return spec_; }

  Tensor<std::uint8_t> reset(std::uint64_t seed) override {
    rng_ = std::make_unique<RngStream>(seed, spec_.name);
    s_ = rng_->uniform_int(8);
    t_ = 0;
    done_ = false;
    return render();
  }

  StepResult step(int action) override {
    check_not_done(done_);
    check_action(action);
    StepResult r;
    if (action == 1) {
      if (s_ == 7) r.reward = 1.0f;
      s_ = (s_ + 1) % 8;
    }
    ++t_;
    done_ = t_ == spec_.max_episode_len;
    r.done = done_;
    r.obs = render();
    return r;
  }

  int expert_action() const override { return 1; }

  int state() const { return s_; }

 private:
  Tensor<std::uint8_t> render() const {
    Tensor<std::uint8_t> img = Tensor<std::uint8_t>::zeros({3, 16, 16});
    const std::uint8_t r = (s_ & 1) ? 255 : 0;
    const std::uint8_t g = (s_ & 2) ? 255 : 0;
    const std::uint8_t b = (s_ & 4) ? 255 : 0;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) envdetail::fill_rgb(img, y, x, r, g, b);
    return img;
  }

  EnvSpec spec_;
  std::unique_ptr<RngStream> rng_;
  int s_ = 0, t_ = 0;
  bool done_ = true;
};

// 6x6 cells drawn as 2x2 pixel blocks with a 2-pixel margin. Touch the key
// (agent turns cyan), then the door, for +1. Random baseline estimated by
// Monte Carlo over 2e5 episodes.
class KeyDoorEnv : public Env {
 public:
  KeyDoorEnv() : spec_{"keydoor", {3, 16, 16}, 4, 32, 0.082, 1.0} {}

  const EnvSpec& spec() const override { return spec_; }

  Tensor<std::uint8_t> reset(std::uint64_t seed) override {
    rng_ = std::make_unique<RngStream>(seed, spec_.name);
    agent_ = rng_->uniform_int(36);
    do key_ = rng_->uniform_int(36);
    while (key_ == agent_);
    do door_ = rng_->uniform_int(36);
    while (door_ == agent_ || door_ == key_);
    carrying_ = false;
    t_ = 0;
    done_ = false;
    return render();
  }

  StepResult step(int action) override {
    check_not_done(done_);
    check_action(action);
    int x = agent_ % 6, y = agent_ / 6;
    switch (action) {
      case 0: x += 1; break;
      case 1: x -= 1; break;
      case 2: y += 1; break;
      case 3: y -= 1; break;
    }
    if (x >= 0 && x < 6 && y >= 0 && y < 6) agent_ = y * 6 + x;
    if (!carrying_ && agent_ == key_) carrying_ = true;
    ++t_;
    StepResult r;
    if (carrying_ && agent_ == door_) {
      r.reward = 1.0f;
      done_ = true;
    } else if (t_ == spec_.max_episode_len) {
      done_ = true;
    }
    r.done = done_;
    r.obs = render();
    return r;
  }

  int expert_action() const override {
    const int target = carrying_ ? door_ : key_;
    const int ax = agent_ % 6, ay = agent_ / 6, tx = target % 6, ty = target / 6;
    if (ax < tx) return 0;
    if (ax > tx) return 1;
    if (ay < ty) return 2;
    return 3;
  }

 private:
  Tensor<std::uint8_t> render() const {
    Tensor<std::uint8_t> img = Tensor<std::uint8_t>::zeros({3, 16, 16});
    auto block = [&img](int cell, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
      const int cx = cell % 6, cy = cell / 6;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) envdetail::fill_rgb(img, 2 + 2 * cy + dy, 2 + 2 * cx + dx, r, g, b);
    };
    block(door_, 255, 0, 255);
    if (!carrying_) block(key_, 255, 255, 0);
    if (carrying_)
      block(agent_, 0, 255, 255);
    else
      block(agent_, 0, 0, 255);
    return img;
  }

  EnvSpec spec_;
  std::unique_ptr<RngStream> rng_;
  int agent_ = 0, key_ = 0, door_ = 0, t_ = 0;
  bool carrying_ = false;
  bool done_ = true;
};

inline std::unique_ptr<Env> make_env(const std::string& name) {
  if (name == "gridcatch") return std::make_unique<GridCatchEnv>(false);
  if (name == "occludedcatch") return std::make_unique<GridCatchEnv>(true);
  if (name == "chain8") return std::make_unique<ChainEnv>();
  if (name == "keydoor") return std::make_unique<KeyDoorEnv>();
  throw ConfigError("unknown env '" + name + "' (expected gridcatch|occludedcatch|chain8|keydoor)");
}

// ---- episode storage ----

struct Episode {
  std::vector<Tensor<std::uint8_t>> frames;  // length() + 1, terminal frame included
  std::vector<int> actions;
  std::vector<float> rewards;
  std::vector<std::uint8_t> dones;

  int length() const { return static_cast<int>(actions.size()); }

  void validate() const {
    const std::size_t n = actions.size();
    if (n == 0) throw ContractError("episode has no steps");
    if (frames.size() != n + 1 || rewards.size() != n || dones.size() != n)
      throw ContractError("episode field lengths inconsistent");
    for (std::size_t i = 0; i + 1 < n; ++i)
      if (dones[i]) throw ContractError("done flag before final step");
  }
};

// Ring buffer of whole episodes capped by total step count. Oldest episodes
// are evicted whole. Segment sampling is uniform over every valid
// (episode, start offset) pair, so segments never cross episode boundaries.
class EpisodeStore {
 public:
  EpisodeStore(std::int64_t capacity_steps, std::uint64_t seed)
      : capacity_(capacity_steps), rng_(seed, "episode_store") {
    if (capacity_steps <= 0) throw ConfigError("EpisodeStore capacity must be positive");
  }

  void add(Episode ep) {
    ep.validate();
    total_steps_ += ep.length();
    episodes_.push_back(std::move(ep));
    while (total_steps_ > capacity_ && episodes_.size() > 1) {
      total_steps_ -= episodes_.front().length();
      episodes_.pop_front();
    }
  }

  std::int64_t total_steps() const { return total_steps_; }
  std::size_t episode_count() const { return episodes_.size(); }
  const std::deque<Episode>& episodes() const { return episodes_; }
  RngStream& rng() { return rng_; }

  int max_episode_len() const {
    int m = 0;
    for (const auto& ep : episodes_) m = std::max(m, ep.length());
    return m;
  }

  struct Segment {
    const Episode* episode = nullptr;
    int offset = 0;
    int length = 0;
  };

  // Uniform over all start offsets of length-T windows. Episodes shorter
  // than T contribute no offsets.
  Segment sample_segment(int T) {
    if (episodes_.empty()) throw ContractError("sample_segment: store is empty");
    if (T < 1) throw ConfigError("sample_segment: T must be >= 1");
    std::int64_t starts = 0;
    for (const auto& ep : episodes_)
      if (ep.length() >= T) starts += ep.length() - T + 1;
    if (starts == 0)
      throw ContractError("sample_segment: no stored episode is at least " + std::to_string(T) + " steps long");
    std::int64_t pick = static_cast<std::int64_t>(rng_.uniform_int(starts));
    for (const auto& ep : episodes_) {
      if (ep.length() < T) continue;
      const std::int64_t here = ep.length() - T + 1;
      if (pick < here) return Segment{&ep, static_cast<int>(pick), T};
      pick -= here;
    }
    throw ContractError("sample_segment: internal accounting error");
  }

  // Uniform over decision-point frames (terminal frames excluded). When
  // `episode_start_only`, restricted to each episode's first frame.
  const Tensor<std::uint8_t>& sample_frame(bool episode_start_only) {
    if (episodes_.empty()) throw ContractError("sample_frame: store is empty");
    if (episode_start_only) {
      const std::size_t e = static_cast<std::size_t>(rng_.uniform_int(static_cast<std::int64_t>(episodes_.size())));
      return episodes_[e].frames[0];
    }
    std::int64_t pick = static_cast<std::int64_t>(rng_.uniform_int(total_steps_));
    for (const auto& ep : episodes_) {
      if (pick < ep.length()) return ep.frames[static_cast<std::size_t>(pick)];
      pick -= ep.length();
    }
    throw ContractError("sample_frame: internal accounting error");
  }

 private:
  std::int64_t capacity_ = 0;
  std::int64_t total_steps_ = 0;
  std::deque<Episode> episodes_;
  RngStream rng_;
};

// Frames as PPMs plus a per-step CSV, for inspection.
inline void dump_episode(const std::string& dir, const Episode& ep) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<std::vector<std::string>> rows;
  for (int i = 0; i <= ep.length(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04d.ppm", i);
    image::write_ppm((fs::path(dir) / name).string(), ep.frames[static_cast<std::size_t>(i)]);
    if (i < ep.length())
      rows.push_back({std::to_string(i), std::to_string(ep.actions[static_cast<std::size_t>(i)]),
                      std::to_string(ep.rewards[static_cast<std::size_t>(i)]),
                      std::to_string(static_cast<int>(ep.dones[static_cast<std::size_t>(i)]))});
  }
  image::write_csv((fs::path(dir) / "episode.csv").string(), {"step", "action", "reward", "done"}, rows);
}

}  // namespace dart
