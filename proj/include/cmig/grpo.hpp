#pragma once

// GRPO numerics as auditable values: group z-score advantages, evidence
// loss masks and the per-token clipped surrogate with a KL penalty. Nothing
// here updates parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmig/trajectory.hpp"

namespace cmig::grpo {

inline constexpr double kDefaultEpsStd = 1e-8;
inline constexpr double kDefaultClipEpsilon = 0.2;
inline constexpr double kDefaultKlBeta = 0.001;
inline constexpr int kDefaultGroupSize = 4;

struct MissingTokenOffsets : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LengthMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// (R_i - mean) / (std + eps_std), population std. A single-member group has
/// zero advantage.
template <typename T>
std::vector<T> group_advantages(std::span<const T> rewards, T eps_std = static_cast<T>(kDefaultEpsStd)) {
  if (!(eps_std > 0)) throw std::invalid_argument("eps_std must be > 0");
  const std::size_t g = rewards.size();
  std::vector<T> out(g, T{0});
  if (g < 2) return out;
  T mean{0};
  for (T r : rewards) mean += r;
  mean /= static_cast<T>(g);
  T var{0};
  for (T r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<T>(g);
  const T denom = std::sqrt(var) + eps_std;
  for (std::size_t i = 0; i < g; ++i) out[i] = (rewards[i] - mean) / denom;
  return out;
}

inline std::vector<double> group_advantages(const std::vector<double>& rewards, double eps_std = kDefaultEpsStd) {
  return group_advantages<double>(std::span<const double>(rewards), eps_std);
}

struct TokenLossMask {
  std::vector<std::uint8_t> mask;

  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{0}));
  }
};

/// Zeroes every token whose character range intersects evidence text.
inline TokenLossMask evidence_loss_mask(const Rollout& r) {
  if (!r.token_offsets) throw MissingTokenOffsets("rollout " + r.id + " has no token offsets");
  const auto spans = evidence_char_spans(r);
  TokenLossMask out;
  out.mask.reserve(r.token_offsets->size());
  // Offsets and spans are both sorted, so one forward sweep suffices.
  std::size_t s = 0;
  for (const auto& tok : *r.token_offsets) {
    while (s < spans.size() && spans[s].second <= tok.char_start) ++s;
    bool hit = false;
    if (tok.char_end > tok.char_start) {
      for (std::size_t k = s; k < spans.size() && spans[k].first < tok.char_end; ++k) {
        if (spans[k].second > tok.char_start) {
          hit = true;
          break;
        }
      }
    }
    out.mask.push_back(hit ? 0 : 1);
  }
  return out;
}

struct SurrogateInputs {
  std::vector<double> logprob_new;
  std::vector<double> logprob_old;
  std::vector<double> logprob_ref;
  double advantage = 0.0;
  double epsilon = kDefaultClipEpsilon;
  double beta = kDefaultKlBeta;
};

struct SurrogateResult {
  std::vector<double> per_token;
  std::vector<double> per_token_kl;
  double mean = 0.0;
  double kl = 0.0;
  double objective = 0.0;
  std::size_t active_tokens = 0;
};

/// min(r * A, clip(r, 1 - eps, 1 + eps) * A).
inline double clipped_term(double ratio, double advantage, double epsilon) {
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

/// exp(ref - new) - (ref - new) - 1, which is >= 0 and zero iff ref == new.
inline double kl_k3(double logprob_new, double logprob_ref) {
  const double d = logprob_ref - logprob_new;
  return std::expm1(d) - d;
}

inline SurrogateResult token_surrogate(const SurrogateInputs& s, const TokenLossMask& mask) {
  const std::size_t n = s.logprob_new.size();
  if (s.logprob_old.size() != n || s.logprob_ref.size() != n || mask.mask.size() != n)
    throw LengthMismatch("surrogate inputs have mismatched lengths");
  if (!(s.epsilon > 0.0 && s.epsilon < 1.0)) throw std::invalid_argument("epsilon must be in (0, 1)");

  SurrogateResult out;
  out.per_token.assign(n, 0.0);
  out.per_token_kl.assign(n, 0.0);
  double sum = 0.0;
  double kl_sum = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    if (!mask.mask[t]) continue;
    const double ratio = std::exp(s.logprob_new[t] - s.logprob_old[t]);
    out.per_token[t] = clipped_term(ratio, s.advantage, s.epsilon);
    out.per_token_kl[t] = kl_k3(s.logprob_new[t], s.logprob_ref[t]);
    sum += out.per_token[t];
    kl_sum += out.per_token_kl[t];
    ++out.active_tokens;
  }
  if (out.active_tokens > 0) {
    out.mean = sum / static_cast<double>(out.active_tokens);
    out.kl = kl_sum / static_cast<double>(out.active_tokens);
  }
  out.objective = out.mean - s.beta * out.kl;
  return out;
}

}  // namespace cmig::grpo
