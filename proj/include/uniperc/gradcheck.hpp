#pragma once

#include <functional>
#include <string>
#include <vector>

#include "uniperc/autograd.hpp"

namespace uniperc::gradcheck {

// A registered check owns its input tensors and a builder that turns leaf
// Vars (one per input) into the scalar under test. The analytic gradient from
// backward() is compared against central finite differences.
struct Check {
    std::string name;
    std::vector<Tensor> inputs;
    std::function<Var(const std::vector<Var>&)> build;
    double tolerance = 1e-3;
};

struct CheckResult {
    std::string name;
    double max_rel_err = 0;
    bool pass = false;
};

CheckResult run_check(const Check& check, double step = 1e-4);

// Every lossbank operation plus warp_synthesize, on random small inputs.
// `flip_gradient_of` negates the analytic gradient of the named check, used
// to prove the harness actually catches broken gradients.
std::vector<Check> default_checks(std::uint64_t seed, const std::string& flip_gradient_of = "");
std::vector<CheckResult> run_all(std::uint64_t seed, const std::string& flip_gradient_of = "");

}  // namespace uniperc::gradcheck
