#ifndef SPECADAPT_ERRORS_HPP
#define SPECADAPT_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace specadapt {

/// Malformed or inconsistent external data (containers, configs, plans).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Numerical failure: non-convergence, singular systems, non-finite results.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace specadapt

#endif // SPECADAPT_ERRORS_HPP
