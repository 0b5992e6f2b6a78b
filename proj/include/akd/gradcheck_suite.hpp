#pragma once

#include <string>
#include <vector>

#include "akd/tensor.hpp"

namespace akd {

struct GradCheckRow {
    std::string term;
    std::size_t checked = 0;
    double max_rel_err = 0.0;
    bool pass = false;
};

// Finite-difference verification of every loss term and of the full combined
// objective, on a 2-layer student / 3-layer teacher with widths 8/16. 64-bit.
std::vector<GradCheckRow> run_gradcheck_suite(double step, double tolerance);

}  // namespace akd
