// One PASS/FAIL line per acceptance criterion. Ground truth comes from value
// iteration rather than the library's linear solve.

#include "bellman/verify.hpp"
#include "oracles.hpp"

#include <iostream>

int main() {
    bellman::VerifyOptions options;
    options.truth = [](const bellman::FiniteMdp& mdp, const bellman::PolicyTable& pi) {
        return oracle::value_iteration(mdp, pi);
    };
    options.scratch_dir = std::filesystem::temp_directory_path() / "bellman_acceptance";
    int failed = 0;
    bellman::run_acceptance(options, [&](const bellman::CheckResult& r) {
        failed += r.passed ? 0 : 1;
        std::cout << bellman::format_result(r) << " (" << r.seconds << " s)" << std::endl;
    });
    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
    return failed == 0 ? 0 : 1;
}
