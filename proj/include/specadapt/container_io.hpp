#ifndef SPECADAPT_CONTAINER_IO_HPP
#define SPECADAPT_CONTAINER_IO_HPP

#include "specadapt/adapters.hpp"
#include "specadapt/matrix.hpp"
#include "specadapt/svd.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace specadapt {

inline constexpr int kSchemaVersion = 1;

/// Matrix container: a UTF-8 JSON sidecar `<stem>.json` describing shape,
/// dtype (f64le) and layout (row-major), plus a raw little-endian float64
/// blob `<stem>.bin`. Round-trips bit-exactly.
void write_matrix(const std::filesystem::path& stem, const Matrix& m);
Matrix read_matrix(const std::filesystem::path& stem);

/// Decomposition as three matrix containers `<stem>_u`, `<stem>_s` (1 x k),
/// `<stem>_v`.
void write_decomposition(const std::filesystem::path& stem, const SpectralDecomposition& d);
SpectralDecomposition read_decomposition(const std::filesystem::path& stem);

/// Adapter container: `<stem>.json` header (kind, base shape, rank, column
/// selection, seed, extras, base fingerprint, tensor list) plus one binary
/// blob `<stem>.<tensor>.bin` per tensor in declared order.
void write_adapter(const std::filesystem::path& stem, const AdapterState& state);
AdapterState read_adapter(const std::filesystem::path& stem);

/// Locale-independent CSV (period decimals, LF line endings, shortest
/// round-trip float formatting).
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

std::string format_double(double value);

/// Raw helpers shared by the CLI.
std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& contents);

} // namespace specadapt

#endif // SPECADAPT_CONTAINER_IO_HPP
