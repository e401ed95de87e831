#include "specadapt/container_io.hpp"

#include "specadapt/errors.hpp"

#include <json.hpp>

#include <bit>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace specadapt {

namespace {

using nlohmann::json;

std::filesystem::path with_suffix(const std::filesystem::path& stem, const std::string& suffix) {
    std::filesystem::path p = stem;
    p += suffix;
    return p;
}

void write_binary_blob(const std::filesystem::path& path, std::span<const double> values) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open '" + path.string() + "' for writing");
    }
    std::vector<unsigned char> bytes(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int b = 0; b < 8; ++b) {
            bytes[i * 8 + static_cast<std::size_t>(b)] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
        }
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw FormatError("short write to '" + path.string() + "'");
    }
}

std::vector<double> read_binary_blob(const std::filesystem::path& path, std::size_t expected_count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open '" + path.string() + "'");
    }
    std::vector<unsigned char> bytes(expected_count * 8);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
        throw FormatError("'" + path.string() + "': expected " + std::to_string(bytes.size()) + " bytes, got " +
                          std::to_string(in.gcount()));
    }
    char extra;
    if (in.read(&extra, 1); in.gcount() != 0) {
        throw FormatError("'" + path.string() + "': trailing bytes beyond declared shape");
    }
    std::vector<double> values(expected_count);
    for (std::size_t i = 0; i < expected_count; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= static_cast<std::uint64_t>(bytes[i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
        }
        values[i] = std::bit_cast<double>(bits);
    }
    return values;
}

json parse_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open '" + path.string() + "'");
    }
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError("'" + path.string() + "': " + e.what());
    }
}

} // namespace

void write_matrix(const std::filesystem::path& stem, const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0) {
        throw FormatError("matrix container requires positive dimensions");
    }
    json sidecar = {{"rows", m.rows()}, {"cols", m.cols()}, {"dtype", "f64le"}, {"layout", "row-major"}};
    write_text_file(with_suffix(stem, ".json"), sidecar.dump(2) + "\n");
    write_binary_blob(with_suffix(stem, ".bin"), m.data());
}

Matrix read_matrix(const std::filesystem::path& stem) {
    const json sidecar = parse_json_file(with_suffix(stem, ".json"));
    if (!sidecar.contains("rows") || !sidecar.contains("cols") || !sidecar.contains("dtype") ||
        !sidecar.contains("layout")) {
        throw FormatError("'" + stem.string() + ".json': missing rows/cols/dtype/layout");
    }
    if (sidecar["dtype"] != "f64le") {
        throw FormatError("'" + stem.string() + ".json': unsupported dtype '" +
                          sidecar["dtype"].get<std::string>() + "'");
    }
    if (sidecar["layout"] != "row-major") {
        throw FormatError("'" + stem.string() + ".json': unsupported layout '" +
                          sidecar["layout"].get<std::string>() + "'");
    }
    const auto rows = sidecar["rows"].get<std::int64_t>();
    const auto cols = sidecar["cols"].get<std::int64_t>();
    if (rows < 1 || cols < 1) {
        throw FormatError("'" + stem.string() + ".json': rows and cols must be positive");
    }
    Matrix m(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols),
             read_binary_blob(with_suffix(stem, ".bin"), static_cast<std::size_t>(rows * cols)));
    require_finite(m, stem.string().c_str());
    return m;
}

void write_decomposition(const std::filesystem::path& stem, const SpectralDecomposition& d) {
    write_matrix(with_suffix(stem, "_u"), d.u);
    write_matrix(with_suffix(stem, "_s"), Matrix(1, d.s.size(), d.s));
    write_matrix(with_suffix(stem, "_v"), d.v);
}

SpectralDecomposition read_decomposition(const std::filesystem::path& stem) {
    SpectralDecomposition d;
    d.u = read_matrix(with_suffix(stem, "_u"));
    const Matrix s = read_matrix(with_suffix(stem, "_s"));
    d.s.assign(s.data().begin(), s.data().end());
    d.v = read_matrix(with_suffix(stem, "_v"));
    if (d.u.cols() != d.s.size() || d.v.cols() != d.s.size()) {
        throw FormatError("'" + stem.string() + "': factor column counts disagree with singular values");
    }
    return d;
}

void write_adapter(const std::filesystem::path& stem, const AdapterState& state) {
    const std::vector<TensorRef> layout = tensor_layout(state);
    const std::vector<Matrix> values = tensor_values(state);

    json header;
    header["schema_version"] = kSchemaVersion;
    header["kind"] = std::string(kind_name(state.kind));
    header["base_shape"] = {state.base_rows, state.base_cols};
    header["rank"] = state.rank;
    json columns;
    const ColumnSelect* sel = nullptr;
    if (state.kind == AdapterKind::SpectralA) {
        sel = &state.as<SpectralAState>().columns;
    } else if (state.kind == AdapterKind::SpectralR) {
        sel = &state.as<SpectralRState>().columns;
    }
    columns["start"] = sel != nullptr ? sel->start : 0;
    columns["count"] = sel != nullptr ? sel->count : 0;
    header["columns"] = columns;
    header["seed"] = state.seed;
    header["base_fingerprint"] = state.base_fingerprint;
    json extras;
    extras["lidb_a"] = state.options.lidb_a;
    extras["lidb_b"] = state.options.lidb_b;
    extras["oft_shared"] = state.options.oft_shared;
    if (state.options.lora_alpha.has_value()) {
        extras["lora_alpha"] = *state.options.lora_alpha;
    }
    header["extras"] = extras;
    json tensors = json::array();
    for (const TensorRef& t : layout) {
        tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"frozen", t.frozen}});
    }
    header["tensors"] = tensors;

    write_text_file(with_suffix(stem, ".json"), header.dump(2) + "\n");
    for (std::size_t i = 0; i < layout.size(); ++i) {
        write_binary_blob(with_suffix(stem, "." + layout[i].name + ".bin"), values[i].data());
    }
}

AdapterState read_adapter(const std::filesystem::path& stem) {
    const json header = parse_json_file(with_suffix(stem, ".json"));
    for (const char* key : {"schema_version", "kind", "base_shape", "rank", "columns", "seed", "tensors"}) {
        if (!header.contains(key)) {
            throw FormatError("'" + stem.string() + ".json': missing field '" + key + "'");
        }
    }
    if (header["schema_version"].get<int>() != kSchemaVersion) {
        throw FormatError("'" + stem.string() + ".json': unsupported schema_version");
    }

    const AdapterKind kind = kind_from_name(header["kind"].get<std::string>());
    const std::size_t rows = header["base_shape"][0].get<std::size_t>();
    const std::size_t cols = header["base_shape"][1].get<std::size_t>();
    const std::size_t rank = header["rank"].get<std::size_t>();
    ColumnSelect columns{header["columns"]["start"].get<std::size_t>(),
                         header["columns"]["count"].get<std::size_t>()};
    AdapterOptions options;
    if (header.contains("extras")) {
        const json& extras = header["extras"];
        options.lidb_a = extras.value("lidb_a", options.lidb_a);
        options.lidb_b = extras.value("lidb_b", options.lidb_b);
        options.oft_shared = extras.value("oft_shared", options.oft_shared);
        if (extras.contains("lora_alpha")) {
            options.lora_alpha = extras["lora_alpha"].get<double>();
        }
    }

    // rebuild an empty state of the right shapes, then overwrite tensors
    AdapterState state;
    state.kind = kind;
    state.rank = rank;
    state.base_rows = rows;
    state.base_cols = cols;
    state.seed = header["seed"].get<std::uint64_t>();
    state.base_fingerprint = header.value("base_fingerprint", std::uint64_t{0});
    state.options = options;
    switch (kind) {
    case AdapterKind::SpectralA:
        state.payload = SpectralAState{Matrix(rows, rank), Matrix(cols, rank), columns};
        break;
    case AdapterKind::SpectralR:
        state.payload = SpectralRState{Matrix(rank, rank), Matrix(rank, rank), columns};
        break;
    case AdapterKind::LoRA: {
        LoRAState lora;
        lora.a = Matrix(rows, rank);
        lora.b = Matrix(cols, rank);
        lora.scale = options.lora_alpha.has_value() && rank > 0 ? *options.lora_alpha / static_cast<double>(rank)
                                                                : 1.0;
        state.payload = std::move(lora);
        break;
    }
    case AdapterKind::OFT: {
        OFTState oft;
        oft.num_blocks = rank;
        oft.shared = options.oft_shared;
        oft.block_sizes = oft_block_sizes(rows, rank);
        const std::size_t lead = oft.block_sizes.front();
        if (oft.shared) {
            oft.raw_blocks.emplace_back(lead, lead);
        } else {
            for (std::size_t b : oft.block_sizes) {
                oft.raw_blocks.emplace_back(b, b);
            }
        }
        state.payload = std::move(oft);
        break;
    }
    case AdapterKind::SVDiff:
        state.payload = SVDiffState{std::vector<double>(std::min(rows, cols), 0.0)};
        break;
    case AdapterKind::VeRA: {
        VeRAState vera;
        vera.frozen_a = Matrix(rows, rank);
        vera.frozen_b = Matrix(cols, rank);
        vera.lambda_a.assign(rows, 0.0);
        vera.lambda_b.assign(rank, 0.0);
        state.payload = std::move(vera);
        break;
    }
    case AdapterKind::LiDB: {
        LiDBState lidb;
        lidb.frozen_a_aux = Matrix(rows, options.lidb_a);
        lidb.frozen_b_aux = Matrix(options.lidb_b, cols);
        lidb.a = Matrix(options.lidb_a, rank);
        lidb.b_t = Matrix(options.lidb_b, rank);
        state.payload = std::move(lidb);
        break;
    }
    case AdapterKind::DoRAVector: {
        DoRAVectorState dora;
        dora.direction_b.assign(rows, 0.0);
        dora.a_prime.assign(rows, 0.0);
        state.payload = std::move(dora);
        break;
    }
    }

    const std::vector<TensorRef> layout = tensor_layout(state);
    const json& tensors = header["tensors"];
    if (tensors.size() != layout.size()) {
        throw FormatError("'" + stem.string() + ".json': expected " + std::to_string(layout.size()) + " tensors");
    }
    std::vector<Matrix> values;
    values.reserve(layout.size());
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const json& t = tensors[i];
        if (t["name"].get<std::string>() != layout[i].name) {
            throw FormatError("'" + stem.string() + ".json': tensor " + std::to_string(i) + " should be '" +
                              layout[i].name + "'");
        }
        const std::size_t trows = t["rows"].get<std::size_t>();
        const std::size_t tcols = t["cols"].get<std::size_t>();
        if (trows != layout[i].rows || tcols != layout[i].cols) {
            throw FormatError("'" + stem.string() + ".json': tensor '" + layout[i].name + "' shape mismatch");
        }
        values.emplace_back(trows, tcols,
                            read_binary_blob(with_suffix(stem, "." + layout[i].name + ".bin"), trows * tcols));
    }
    set_tensor_values(state, values);
    return state;
}

std::string format_double(double value) {
    char buffer[32];
    const auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
    if (ec != std::errc{}) {
        throw NumericalError("format_double: conversion failed");
    }
    return {buffer, ptr};
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
    std::ostringstream out;
    for (std::size_t i = 0; i < header.size(); ++i) {
        out << header[i];
        out << (i + 1 < header.size() ? ',' : '\n');
    }
    for (const auto& row : rows) {
        if (row.size() != header.size()) {
            throw std::invalid_argument("write_csv: row width does not match header");
        }
        for (std::size_t i = 0; i < row.size(); ++i) {
            out << format_double(row[i]);
            out << (i + 1 < row.size() ? ',' : '\n');
        }
    }
    write_text_file(path, out.str());
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open '" + path.string() + "'");
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& contents) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot open '" + path.string() + "' for writing");
    }
    out << contents;
    if (!out) {
        throw FormatError("short write to '" + path.string() + "'");
    }
}

} // namespace specadapt
