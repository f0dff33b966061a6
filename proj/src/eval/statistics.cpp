#include "chunkflow/eval/statistics.hpp"

#include <algorithm>
#include <cmath>

#include "chunkflow/core/errors.hpp"
#include "chunkflow/core/rng.hpp"

namespace chunkflow {

// Greatest convex minorant / least concave majorant cycling of Hartigan &
// Hartigan (AS 217), with 1-based indexing kept from the reference routine.
double dip_statistic(std::span<const double> sample) {
  const int n = static_cast<int>(sample.size());
  if (n == 0) throw ContractError("dip_statistic: empty sample");
  std::vector<double> xs(sample.begin(), sample.end());
  std::sort(xs.begin(), xs.end());
  const double* x = xs.data() - 1;

  double dip = 1.0;
  if (n < 2 || x[n] == x[1]) return dip / (2.0 * n);

  std::vector<int> mn_buf(std::size_t(n) + 1), mj_buf(std::size_t(n) + 1), gcm_buf(std::size_t(n) + 2),
      lcm_buf(std::size_t(n) + 2);
  int* mn = mn_buf.data();
  int* mj = mj_buf.data();
  int* gcm = gcm_buf.data();
  int* lcm = lcm_buf.data();

  mn[1] = 1;
  for (int j = 2; j <= n; ++j) {
    mn[j] = j - 1;
    while (true) {
      const int mnj = mn[j], mnmnj = mn[mnj];
      if (mnj == 1 || (x[j] - x[mnj]) * (mnj - mnmnj) < (x[mnj] - x[mnmnj]) * (j - mnj)) break;
      mn[j] = mnmnj;
    }
  }
  mj[n] = n;
  for (int k = n - 1; k >= 1; --k) {
    mj[k] = k + 1;
    while (true) {
      const int mjk = mj[k], mjmjk = mj[mjk];
      if (mjk == n || (x[k] - x[mjk]) * (mjk - mjmjk) < (x[mjk] - x[mjmjk]) * (k - mjk)) break;
      mj[k] = mjmjk;
    }
  }

  int low = 1, high = n;
  while (true) {
    int i = 1;
    gcm[1] = high;
    for (i = 1; gcm[i] > low; ++i) gcm[i + 1] = mn[gcm[i]];
    const int l_gcm = i;
    int ig = l_gcm, ix = ig - 1;

    lcm[1] = low;
    for (i = 1; lcm[i] < high; ++i) lcm[i + 1] = mj[lcm[i]];
    const int l_lcm = i;
    int ih = l_lcm, iv = 2;

    long double d = 0.0L;
    if (l_gcm != 2 || l_lcm != 2) {
      do {
        long double dx;
        const int gcmix = gcm[ix], lcmiv = lcm[iv];
        if (gcmix > lcmiv) {
          const int gcmi1 = gcm[ix + 1];
          dx = (lcmiv - gcmi1 + 1) -
               (static_cast<long double>(x[lcmiv]) - x[gcmi1]) * (gcmix - gcmi1) / (x[gcmix] - x[gcmi1]);
          ++iv;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv - 1;
          }
        } else {
          const int lcmiv1 = lcm[iv - 1];
          dx = (static_cast<long double>(x[gcmix]) - x[lcmiv1]) * (lcmiv - lcmiv1) / (x[lcmiv] - x[lcmiv1]) -
               (gcmix - lcmiv1 - 1);
          --ix;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv;
          }
        }
        if (ix < 1) ix = 1;
        if (iv > l_lcm) iv = l_lcm;
      } while (gcm[ix] != lcm[iv]);
    } else {
      d = 1.0L;
    }
    if (d < dip) break;

    double dip_l = 0.0;
    for (int j = ig; j < l_gcm; ++j) {
      double max_t = 1.0;
      const int jb = gcm[j + 1], je = gcm[j];
      if (je - jb > 1 && x[je] != x[jb]) {
        const double c = (je - jb) / (x[je] - x[jb]);
        for (int jj = jb; jj <= je; ++jj) max_t = std::max(max_t, (jj - jb + 1) - (x[jj] - x[jb]) * c);
      }
      dip_l = std::max(dip_l, max_t);
    }
    double dip_u = 0.0;
    for (int j = ih; j < l_lcm; ++j) {
      double max_t = 1.0;
      const int jb = lcm[j], je = lcm[j + 1];
      if (je - jb > 1 && x[je] != x[jb]) {
        const double c = (je - jb) / (x[je] - x[jb]);
        for (int jj = jb; jj <= je; ++jj) max_t = std::max(max_t, (x[jj] - x[jb]) * c - (jj - jb - 1));
      }
      dip_u = std::max(dip_u, max_t);
    }
    dip = std::max(dip, std::max(dip_l, dip_u));

    if (low == gcm[ig] && high == lcm[ih]) break;
    low = gcm[ig];
    high = lcm[ih];
  }
  return dip / (2.0 * n);
}

double dip_critical_value(std::size_t n, double alpha, int replicates, std::uint64_t seed) {
  if (n < 1 || replicates < 2 || !(alpha > 0.0 && alpha < 1.0)) throw ContractError("dip_critical_value: bad arguments");
  Rng rng(seed);
  std::vector<double> stats, sample(n);
  for (int r = 0; r < replicates; ++r) {
    for (double& v : sample) v = rng.uniform();
    stats.push_back(dip_statistic(sample));
  }
  std::sort(stats.begin(), stats.end());
  const auto k = std::min(stats.size() - 1, static_cast<std::size_t>(std::ceil((1.0 - alpha) * double(replicates))) - 1);
  return stats[k];
}

SuccessEstimate success_estimate(std::size_t successes, std::size_t trials) {
  if (trials == 0) throw ContractError("success_estimate: no trials");
  SuccessEstimate e;
  e.trials = trials;
  e.p_hat = double(successes) / double(trials);
  e.standard_error = std::sqrt(e.p_hat * (1.0 - e.p_hat) / double(trials));
  return e;
}

SuccessCurve success_rate_with_se(std::span<const int> outcomes) {
  if (outcomes.empty()) throw ContractError("success_rate_with_se: no trials");
  SuccessCurve curve;
  std::size_t wins = 0;
  for (std::size_t k = 0; k < outcomes.size(); ++k) {
    if (outcomes[k] != 0 && outcomes[k] != 1) throw ContractError("success_rate_with_se: outcomes must be 0 or 1");
    wins += std::size_t(outcomes[k]);
    curve.running.push_back(success_estimate(wins, k + 1));
  }
  curve.final = curve.running.back();
  return curve;
}

double running_band_coverage(double p_star, std::size_t n, int replications, double z, std::uint64_t seed) {
  if (!(p_star >= 0.0 && p_star <= 1.0) || n == 0 || replications <= 0)
    throw ContractError("running_band_coverage: need p in [0, 1], n > 0 and replications > 0");
  Rng rng(seed);
  std::vector<int> outcomes(n);
  std::size_t inside = 0;
  for (int rep = 0; rep < replications; ++rep) {
    for (int& o : outcomes) o = rng.uniform() < p_star ? 1 : 0;
    const SuccessCurve c = success_rate_with_se(outcomes);
    for (const SuccessEstimate& e : c.running)
      inside += std::abs(c.final.p_hat - e.p_hat) <= z * e.standard_error;
  }
  return double(inside) / (double(n) * replications);
}

std::vector<int> trials_from_errors(std::span<const double> errors, double threshold) {
  std::vector<int> out;
  out.reserve(errors.size());
  for (double e : errors) out.push_back(e <= threshold ? 1 : 0);
  return out;
}

}  // namespace chunkflow
