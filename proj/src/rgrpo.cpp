#include "vlmr3/rgrpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vlmr3::rgrpo {

std::size_t TokenMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), true));
}

std::vector<double> normalize_advantages(std::span<const double> rewards) {
  const std::size_t m = rewards.size();
  if (m < 2) throw Error(ErrorCode::GroupTooSmall, "advantage normalisation needs M >= 2, got " + std::to_string(m));
  std::vector<double> out(m, 0.0);
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) return out;

  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(m);
  double ss = 0.0;
  for (double r : rewards) ss += (r - mean) * (r - mean);
  const double sd = std::sqrt(ss / static_cast<double>(m));
  if (sd == 0.0) return out;
  for (std::size_t i = 0; i < m; ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

TokenMask action_mask(const Trajectory& trajectory) {
  check_segment_partition(trajectory);
  TokenMask mask;
  mask.bits.assign(trajectory.token_ids.size(), true);
  for (const auto& seg : trajectory.segments) {
    if (seg.kind != SegmentKind::InjectedImage) continue;
    for (std::size_t t = seg.token_span.begin; t < seg.token_span.end; ++t) mask.bits[t] = false;
  }
  return mask;
}

double masked_sum(std::span<const double> logprobs, const TokenMask& mask) {
  if (logprobs.size() != mask.size())
    throw Error(ErrorCode::SpanMismatch, "logprob vector and mask differ in length");
  double sum = 0.0;
  for (std::size_t t = 0; t < logprobs.size(); ++t)
    if (mask[t]) sum += logprobs[t];
  return sum;
}

double kl_estimate(double logp_theta, double logp_ref) {
  // exp(d) - d - 1 written with expm1 to keep precision near d = 0.
  const double d = logp_ref - logp_theta;
  return std::max(0.0, std::expm1(d) - d);
}

LossResult rgrpo_loss(std::span<const ScoredGroup> groups, double beta) {
  if (!(beta >= 0.0)) throw Error(ErrorCode::InvalidArgument, "beta must be >= 0");
  LossResult out;
  if (groups.empty()) return out;

  const double group_weight = 1.0 / static_cast<double>(groups.size());
  std::size_t kl_terms = 0;
  for (const auto& g : groups) {
    const std::size_t m = g.advantages.size();
    if (m < 2) throw Error(ErrorCode::GroupTooSmall, "group has fewer than two trajectories");
    if (g.logp_theta.size() != m) throw Error(ErrorCode::SpanMismatch, "logp_theta size differs from M");
    if (beta > 0.0 && (!g.logp_ref || g.logp_ref->size() != m))
      throw Error(ErrorCode::MissingReference, "beta > 0 requires reference logprobs");
    const auto& detached = g.logp_detached ? *g.logp_detached : g.logp_theta;

    const double inv_m = 1.0 / static_cast<double>(m);
    double group_sum = 0.0;
    std::vector<double> dlogp(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double ratio = std::exp(g.logp_theta[i] - detached[i]);
      double term = ratio * g.advantages[i];
      double dterm = ratio * g.advantages[i];
      if (g.logp_ref) {
        const double kl = kl_estimate(g.logp_theta[i], (*g.logp_ref)[i]);
        out.kl_mean += kl;
        ++kl_terms;
        if (beta > 0.0) {
          const double x = std::exp((*g.logp_ref)[i] - g.logp_theta[i]);
          term -= beta * kl;
          dterm -= beta * (1.0 - x);
        }
      }
      group_sum += term;
      dlogp[i] = -group_weight * inv_m * dterm;
    }
    out.value += -group_weight * inv_m * group_sum;
    out.dlogp.push_back(std::move(dlogp));
  }
  if (kl_terms > 0) out.kl_mean /= static_cast<double>(kl_terms);
  return out;
}

LossResult rgrpo_loss(const ScoredGroup& group, double beta) {
  return rgrpo_loss(std::span<const ScoredGroup>(&group, 1), beta);
}

double sft_loss(std::span<const double> logprobs, const TokenMask& mask) {
  const std::size_t n = mask.count();
  if (n == 0) throw Error(ErrorCode::EmptyMask, "no action tokens to train on");
  return -masked_sum(logprobs, mask) / static_cast<double>(n);
}

nlohmann::json to_json(const StepMetrics& m) {
  return {
      {"step", m.step},
      {"mean_reward", m.mean_reward},
      {"reward_components",
       {{"accuracy", m.mean_accuracy}, {"format", m.mean_format}, {"validity", m.mean_validity},
        {"length", m.mean_length}}},
      {"advantage_std", m.advantage_std},
      {"loss", m.loss},
      {"kl_mean", m.kl_mean},
      {"valid_crop_rate", m.valid_crop_rate},
      {"groups", m.groups},
      {"trajectories", m.trajectories},
      {"parameter_version", m.parameter_version},
      {"label", m.label},
  };
}

}  // namespace vlmr3::rgrpo
