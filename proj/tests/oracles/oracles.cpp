#include "oracles.hpp"

#include <quadmath.h>

#include <cmath>
#include <stdexcept>

namespace oracle {

namespace {

using quad = __float128;

quad row_logprob(const std::vector<quad>& logits, std::size_t base, std::size_t vocab, int token) {
  // log(sum exp) the slow way, but in quad precision with the max pulled out
  quad m = logits[base];
  for (std::size_t k = 1; k < vocab; ++k) {
    if (logits[base + k] > m) m = logits[base + k];
  }
  quad total = 0;
  for (std::size_t k = 0; k < vocab; ++k) total += expq(logits[base + k] - m);
  return logits[base + static_cast<std::size_t>(token)] - m - logq(total);
}

std::vector<quad> widen(const Table& t) { return std::vector<quad>(t.logits.begin(), t.logits.end()); }

quad logprob_wide(const Table& t, const std::vector<quad>& logits, std::size_t context, const std::vector<int>& tokens) {
  if (tokens.size() != t.positions) throw std::invalid_argument("oracle: token count differs from positions");
  quad sum = 0;
  for (std::size_t p = 0; p < t.positions; ++p) {
    sum += row_logprob(logits, (context * t.positions + p) * t.vocab, t.vocab, tokens[p]);
  }
  return sum;
}

quad softplus_wide(quad x) { return log1pq(expq(x)); }

quad loss_wide(const Table& theta, const std::vector<quad>& th, const Table& ref, const std::vector<quad>& rf,
               const std::vector<Example>& batch, quad beta) {
  quad total = 0;
  for (const auto& ex : batch) {
    const quad dw = logprob_wide(theta, th, ex.context, ex.chosen) - logprob_wide(ref, rf, ex.context, ex.chosen);
    const quad dl = logprob_wide(theta, th, ex.context, ex.rejected) - logprob_wide(ref, rf, ex.context, ex.rejected);
    total += softplus_wide(-beta * (dw - dl));
  }
  return total / static_cast<quad>(batch.size());
}

}  // namespace

double logprob_q(const Table& t, std::size_t context, const std::vector<int>& tokens) {
  return static_cast<double>(logprob_wide(t, widen(t), context, tokens));
}

double dpo_loss_q(const Table& theta, const Table& ref, const std::vector<Example>& batch, double beta) {
  return static_cast<double>(loss_wide(theta, widen(theta), ref, widen(ref), batch, beta));
}

double implicit_reward_q(const Table& theta, const Table& ref, std::size_t context, const std::vector<int>& tokens,
                         double beta) {
  const quad r = static_cast<quad>(beta) *
                 (logprob_wide(theta, widen(theta), context, tokens) - logprob_wide(ref, widen(ref), context, tokens));
  return static_cast<double>(r);
}

double softplus_q(double x) { return static_cast<double>(softplus_wide(x)); }

std::vector<double> fd_gradient(const Table& theta, const Table& ref, const std::vector<Example>& batch, double beta,
                                double h) {
  auto th = widen(theta);
  const auto rf = widen(ref);
  std::vector<double> grad(th.size());
  for (std::size_t i = 0; i < th.size(); ++i) {
    const quad saved = th[i];
    th[i] = saved + h;
    const quad up = loss_wide(theta, th, ref, rf, batch, beta);
    th[i] = saved - h;
    const quad down = loss_wide(theta, th, ref, rf, batch, beta);
    th[i] = saved;
    grad[i] = static_cast<double>((up - down) / (2 * static_cast<quad>(h)));
  }
  return grad;
}

std::size_t argmax_reward(const Table& theta, const Table& ref, std::size_t context,
                          const std::vector<std::vector<int>>& candidates, double beta) {
  std::size_t best = 0;
  quad best_r = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const quad r = static_cast<quad>(beta) * (logprob_wide(theta, widen(theta), context, candidates[i]) -
                                              logprob_wide(ref, widen(ref), context, candidates[i]));
    if (i == 0 || r > best_r) {
      best = i;
      best_r = r;
    }
  }
  return best;
}

bool group_kept(const std::vector<int>& scores, int threshold) {
  bool any_pos = false;
  bool any_neg = false;
  for (int s : scores) {
    if (s >= threshold) any_pos = true;
    else any_neg = true;
  }
  return any_pos && any_neg;
}

GroupStats build_stats(const std::vector<std::vector<int>>& groups, int threshold) {
  GroupStats st;
  for (const auto& g : groups) {
    int n_pos = 0;
    for (int s : g) {
      st.histogram[static_cast<std::size_t>(s - 1)] += 1;
      if (s >= threshold) ++n_pos;
    }
    if (n_pos == static_cast<int>(g.size())) st.all_high += 1;
    else if (n_pos == 0) st.all_low += 1;
    else st.kept += 1;
  }
  return st;
}

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  // one-pass textbook formula in long double
  long double n = static_cast<long double>(xs.size());
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const long double x = xs[i], y = ys[i];
    sx += x;
    sy += y;
    sxx += x * x;
    syy += y * y;
    sxy += x * y;
  }
  const long double num = n * sxy - sx * sy;
  const long double den = std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
  return static_cast<double>(num / den);
}

DiffStats diff_stats(const std::vector<int>& a, const std::vector<int>& b) {
  DiffStats out;
  const double n = static_cast<double>(a.size());
  double sum = 0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] - b[i];
  out.mean = sum / n;
  double ss = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - out.mean) * (a[i] - b[i] - out.mean);
  out.sigma = std::sqrt(ss / n);
  std::size_t within = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const int d = a[i] - b[i];
    if (std::fabs(d - out.mean) <= out.sigma) ++within;
    if (d >= -4 && d <= 4) out.histogram[static_cast<std::size_t>(d + 4)] += 1;
  }
  out.frac_within = static_cast<double>(within) / n;
  return out;
}

AgreementCount preference_agreement(const std::vector<std::array<int, 4>>& groups, bool reference_only) {
  AgreementCount c;
  for (const auto& g : groups) {
    const bool tie_a = g[0] == g[1];
    const bool tie_b = g[2] == g[3];
    if (tie_b || (!reference_only && tie_a)) {
      ++c.ties;
      continue;
    }
    ++c.compared;
    // a tie on judge a under the reference rule never matches b's strict preference
    const int pref_a = g[0] > g[1] ? 1 : (g[0] < g[1] ? 2 : 0);
    const int pref_b = g[2] > g[3] ? 1 : 2;
    if (pref_a == pref_b) ++c.agree;
  }
  return c;
}

Accuracy accuracy(const std::vector<int>& scores, int threshold) {
  Accuracy out;
  int pass = 0;
  long total = 0;
  for (int s : scores) {
    if (s >= threshold) ++pass;
    total += s;
  }
  out.accuracy = static_cast<double>(pass) / static_cast<double>(scores.size());
  out.mean = static_cast<double>(total) / static_cast<double>(scores.size());
  return out;
}

}  // namespace oracle
