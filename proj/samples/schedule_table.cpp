// Prints the noise schedule for a chain length, rescaled from the
// 1000-step endpoints the same way the presets do.
//
//   ./schedule_table [T]

#include <cstdio>
#include <cstdlib>

#include "unitddpm.hpp"

int main(int argc, char** argv) {
  unitddpm::RunConfig cfg;
  cfg.T = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 50;
  const auto s = unitddpm::schedule_from(cfg);
  std::printf("%6s %12s %12s %12s\n", "t", "alpha", "alpha_bar", "sigma");
  for (std::size_t t = 1; t <= s.T; ++t)
    if (t <= 3 || t + 3 > s.T || t % (s.T / 10 ? s.T / 10 : 1) == 0)
      std::printf("%6zu %12.8f %12.8f %12.8f\n", t, s.alpha_at(t), s.alpha_bar_at(t), s.sigma_at(t));
  return 0;
}
