#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lrbf {

enum class ErrorCode {
  dimension_mismatch,
  invalid_parameter,
  invalid_argument,
  model_tag_mismatch,
  insufficient_draws,
  chain_failure,
  non_convergence,
  non_pd_hessian,
  // ingestion
  empty_file,
  bad_header,
  ragged_row,
  non_numeric,
  duplicate_item,
  io_failure,
  // configuration
  invalid_config,
};

std::string_view to_string(ErrorCode code);

// True for errors caused by bad inputs rather than by a computation failing.
bool is_validation_error(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class NonPdHessianError : public Error {
 public:
  NonPdHessianError(const std::string& message, double smallest_eigenvalue)
      : Error(ErrorCode::non_pd_hessian, message),
        smallest_eigenvalue_(smallest_eigenvalue) {}

  double smallest_eigenvalue() const noexcept { return smallest_eigenvalue_; }

 private:
  double smallest_eigenvalue_;
};

}  // namespace lrbf
