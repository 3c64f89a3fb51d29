#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcct/autograd.hpp"

namespace dcct {

enum class GradTarget { Cca, Hta, Losses, Full };

const char* grad_target_name(GradTarget target);
GradTarget parse_grad_target(const std::string& text);

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Relative error denominator floor: |a - n| / max(|a|, |n|, floor).
  double floor = 1e-5;
  std::uint64_t seed = 0;
  // Entries checked per tensor; 0 checks every entry.
  int max_entries = 0;
};

struct GroupResult {
  std::string name;
  double max_rel_error = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int checked = 0;
  int skipped_kinks = 0;
  bool finite = true;
  bool pass = true;
};

struct GradCheckReport {
  std::string target;
  double eps = 0.0;
  double tolerance = 0.0;
  std::vector<GroupResult> groups;

  bool passed() const;
  double max_rel_error() const;
  std::string format() const;
};

struct GradGroup {
  std::string name;
  Var leaf;  // must require gradients
};

// Central differences of `probe` (a scalar) against reverse-mode gradients,
// one group per leaf. Entries whose +eps or -eps evaluation crosses a
// non-differentiable point are skipped and counted.
GradCheckReport check_gradients(const std::string& target, const std::vector<GradGroup>& groups,
                                const std::function<Var()>& probe, const GradCheckOptions& options);

// Built-in targets on the tiny configuration.
GradCheckReport run_grad_check(GradTarget target, const GradCheckOptions& options);

// Gradients reaching CCA, HTA and the video classifier when only the
// distillation terms drive the loss. All should be exactly zero.
struct TeacherPathReport {
  std::vector<std::pair<std::string, double>> teacher_max_abs;  // per parameter
  double student_max_abs = 0.0;  // largest hint/backbone gradient, for contrast
};
TeacherPathReport check_teacher_detachment(std::uint64_t seed);

}  // namespace dcct
