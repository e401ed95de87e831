#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "specadapt/container_io.hpp"
#include "specadapt/errors.hpp"
#include "specadapt/rng.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <limits>

using namespace specadapt;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        const auto tick = std::chrono::steady_clock::now().time_since_epoch().count();
        path = fs::temp_directory_path() / ("specadapt_io_" + std::to_string(tick));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

} // namespace

TEST_CASE("matrix container round-trips bit-exactly, including awkward values") {
    TempDir dir;
    Matrix m(3, 4);
    Rng rng(1);
    for (double& x : m.data()) {
        x = rng.normal();
    }
    m(0, 0) = -0.0;
    m(0, 1) = 5e-324;                                      // smallest denormal
    m(0, 2) = std::numeric_limits<double>::max();
    m(1, 0) = -std::numeric_limits<double>::denorm_min();
    m(2, 3) = 1.0 + std::numeric_limits<double>::epsilon();

    const fs::path stem = dir.path / "m";
    write_matrix(stem, m);
    const Matrix back = read_matrix(stem);
    CHECK(back == m);

    // a second write produces identical bytes
    const fs::path stem2 = dir.path / "m2";
    write_matrix(stem2, m);
    CHECK(read_text_file(dir.path / "m.bin") == read_text_file(dir.path / "m2.bin"));
}

TEST_CASE("matrix container rejects malformed input") {
    TempDir dir;
    Rng rng(2);
    const Matrix m = Matrix::random_gaussian(2, 3, rng);
    const fs::path stem = dir.path / "m";
    write_matrix(stem, m);

    SUBCASE("missing file") { CHECK_THROWS_AS((void)read_matrix(dir.path / "nope"), FormatError); }

    SUBCASE("wrong dtype") {
        write_text_file(dir.path / "m.json", R"({"rows":2,"cols":3,"dtype":"f32le","layout":"row-major"})");
        CHECK_THROWS_WITH_AS((void)read_matrix(stem), doctest::Contains("dtype"), FormatError);
    }

    SUBCASE("wrong layout") {
        write_text_file(dir.path / "m.json", R"({"rows":2,"cols":3,"dtype":"f64le","layout":"col-major"})");
        CHECK_THROWS_WITH_AS((void)read_matrix(stem), doctest::Contains("layout"), FormatError);
    }

    SUBCASE("nonpositive shape") {
        write_text_file(dir.path / "m.json", R"({"rows":0,"cols":3,"dtype":"f64le","layout":"row-major"})");
        CHECK_THROWS_AS((void)read_matrix(stem), FormatError);
    }

    SUBCASE("truncated blob") {
        const std::string blob = read_text_file(dir.path / "m.bin");
        write_text_file(dir.path / "m.bin", blob.substr(0, blob.size() - 1));
        CHECK_THROWS_WITH_AS((void)read_matrix(stem), doctest::Contains("bytes"), FormatError);
    }

    SUBCASE("oversized blob") {
        const std::string blob = read_text_file(dir.path / "m.bin");
        write_text_file(dir.path / "m.bin", blob + "x");
        CHECK_THROWS_WITH_AS((void)read_matrix(stem), doctest::Contains("trailing"), FormatError);
    }

    SUBCASE("non-finite entries") {
        Matrix bad = m;
        bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
        std::vector<unsigned char> raw;
        // bypass write_matrix validation by writing through it anyway:
        // the writer does not validate, the reader must
        write_matrix(stem, bad);
        CHECK_THROWS_WITH_AS((void)read_matrix(stem), doctest::Contains("non-finite"), FormatError);
    }

    SUBCASE("invalid json") {
        write_text_file(dir.path / "m.json", "{not json");
        CHECK_THROWS_AS((void)read_matrix(stem), FormatError);
    }
}

TEST_CASE("decomposition containers round-trip") {
    TempDir dir;
    Rng rng(3);
    const SpectralDecomposition d = svd_thin(Matrix::random_gaussian(7, 5, rng));
    const fs::path stem = dir.path / "dec";
    write_decomposition(stem, d);
    const SpectralDecomposition back = read_decomposition(stem);
    CHECK(back.u == d.u);
    CHECK(back.s == d.s);
    CHECK(back.v == d.v);
    CHECK(fingerprint(back) == fingerprint(d));
}

TEST_CASE("adapter containers round-trip bit-exactly for every kind") {
    TempDir dir;
    Rng rng(4);
    const Matrix w = Matrix::random_gaussian(6, 9, rng);

    for (AdapterKind kind : kAllKinds) {
        BaseWeight base = kind == AdapterKind::SpectralA || kind == AdapterKind::SpectralR ||
                                  kind == AdapterKind::SVDiff
                              ? BaseWeight::spectral(w)
                              : BaseWeight::dense(w);
        std::size_t rank = 2;
        if (kind == AdapterKind::DoRAVector) {
            base = BaseWeight::dense(Matrix::random_gaussian(8, 1, rng));
            rank = 1;
        }
        ColumnSelect columns{};
        if (kind == AdapterKind::SpectralA || kind == AdapterKind::SpectralR) {
            columns = ColumnSelect{1, rank};
        }
        AdapterState st = init_adapter(kind, base, rank, columns, 0xfeed + static_cast<int>(kind));

        // roughen the trainable parameters so the round trip is nontrivial
        std::vector<double> params(num_trainable(st));
        for (double& p : params) {
            p = rng.normal();
        }
        unpack_params(st, params);

        const fs::path stem = dir.path / std::string(kind_name(kind));
        write_adapter(stem, st);
        const AdapterState back = read_adapter(stem);

        CHECK(back.kind == st.kind);
        CHECK(back.rank == st.rank);
        CHECK(back.seed == st.seed);
        CHECK(back.base_fingerprint == st.base_fingerprint);
        const std::vector<Matrix> original = tensor_values(st);
        const std::vector<Matrix> restored = tensor_values(back);
        REQUIRE(original.size() == restored.size());
        for (std::size_t i = 0; i < original.size(); ++i) {
            CHECK(original[i] == restored[i]);
        }
        // the restored state reproduces the same effective weight bits
        CHECK(effective_weight(base, back) == effective_weight(base, st));
    }
}

TEST_CASE("adapter container rejects inconsistent headers") {
    TempDir dir;
    Rng rng(5);
    const BaseWeight base = BaseWeight::dense(Matrix::random_gaussian(4, 5, rng));
    const AdapterState st = init_adapter(AdapterKind::LoRA, base, 2, {}, 1);
    const fs::path stem = dir.path / "adp";
    write_adapter(stem, st);

    SUBCASE("unknown kind tag") {
        std::string header = read_text_file(dir.path / "adp.json");
        const auto pos = header.find("\"lora\"");
        REQUIRE(pos != std::string::npos);
        header.replace(pos, 6, "\"bogus\"");
        write_text_file(dir.path / "adp.json", header);
        CHECK_THROWS_WITH_AS((void)read_adapter(stem), doctest::Contains("bogus"), FormatError);
    }

    SUBCASE("missing tensor blob") {
        fs::remove(dir.path / "adp.b.bin");
        CHECK_THROWS_AS((void)read_adapter(stem), FormatError);
    }
}

TEST_CASE("csv output is locale-independent") {
    TempDir dir;
    const fs::path path = dir.path / "out.csv";
    write_csv(path, {"step", "loss"}, {{0.0, 0.5}, {1.0, 0.25}, {2.0, 1e-12}});
    const std::string text = read_text_file(path);
    CHECK(text == "step,loss\n0,0.5\n1,0.25\n2,1e-12\n");
    CHECK(text.find(',') != std::string::npos);
    CHECK(text.find(';') == std::string::npos);
    CHECK(text.find("\r") == std::string::npos);
}

TEST_CASE("format_double emits shortest round-trip representations") {
    CHECK(format_double(0.1) == "0.1");
    CHECK(format_double(1.0 / 3.0) == "0.3333333333333333");
    CHECK(format_double(-0.0) == "-0");
    const double value = 1.0 + std::numeric_limits<double>::epsilon();
    CHECK(std::stod(format_double(value)) == value);
}
