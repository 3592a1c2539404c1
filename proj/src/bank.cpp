#include "tokmem/bank.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "tokmem/io_util.hpp"

namespace tokmem {

template <class S>
void MemoryBank<S>::validate() const {
    const int l = size();
    if (rows.cols != dim) throw ValidationError("bank: row width mismatch");
    if (variant == BankVariant::Decoupled && (steer.rows != l || steer.cols != dim))
        throw ValidationError("bank: steer shape mismatch");
    if (static_cast<int>(labels.size()) != l) throw ValidationError("bank: label count mismatch");
    std::set<std::string> seen(labels.begin(), labels.end());
    if (static_cast<int>(seen.size()) != l) throw ValidationError("bank: duplicate labels");
    std::vector<char> hit(static_cast<size_t>(l), 0);
    for (int i : active) {
        if (i < 0 || i >= l || hit[i]) throw ValidationError("bank: bad active set");
        hit[i] = 1;
    }
    for (int i : inactive) {
        if (i < 0 || i >= l || hit[i]) throw ValidationError("bank: active/inactive overlap");
        hit[i] = 1;
    }
    if (std::count(hit.begin(), hit.end(), 1) != l)
        throw ValidationError("bank: active/inactive do not cover all rows");
    for (S v : rows.a)
        if (!std::isfinite(static_cast<double>(v))) throw ValidationError("bank: non-finite row");
    for (S v : steer.a)
        if (!std::isfinite(static_cast<double>(v))) throw ValidationError("bank: non-finite steer row");
}

namespace {

template <class S>
void init_rows(Mat<S>& m, int row_begin, int row_end, const Mat<S>& base, uint64_t seed,
               uint64_t salt, double jitter_scale) {
    const int d = base.cols;
    std::vector<S> mean(static_cast<size_t>(d), S(0));
    for (int i = 0; i < d; ++i) {
        S acc = S(0);
        for (int v = 0; v < base.rows; ++v) acc += base.at(v, i);
        mean[i] = acc / S(base.rows);
    }
    double norm = 0.0;
    for (int i = 0; i < d; ++i) norm += static_cast<double>(mean[i]) * static_cast<double>(mean[i]);
    norm = std::sqrt(norm);
    const double jitter = jitter_scale * norm;
    for (int r = row_begin; r < row_end; ++r) {
        Rng rng(mix_seed(seed, salt + static_cast<uint64_t>(r)));
        for (int i = 0; i < d; ++i) {
            m.at(r, i) = mean[i] + S(jitter * rng.normal());
        }
    }
}

template <class S>
double row_norm(const Mat<S>& m, int r) {
    double acc = 0.0;
    for (int i = 0; i < m.cols; ++i) {
        acc += static_cast<double>(m.at(r, i)) * static_cast<double>(m.at(r, i));
    }
    return std::sqrt(acc);
}

}  // namespace

template <class S>
MemoryBank<S> create_bank(int d, int n, const Mat<S>& base_embeddings, uint64_t seed,
                          BankVariant variant, TokenId first_token_id, double jitter_scale) {
    if (n < 0) throw InputError("create_bank: negative row count");
    if (base_embeddings.cols != d) throw InputError("create_bank: embedding width mismatch");
    MemoryBank<S> bank;
    bank.dim = d;
    bank.first_token_id = first_token_id;
    bank.variant = variant;
    bank.seed = seed;
    bank.rows = Mat<S>(n, d);
    if (variant == BankVariant::Decoupled) bank.steer = Mat<S>(n, d);
    init_rows(bank.rows, 0, n, base_embeddings, seed, 0x0, jitter_scale);
    if (variant == BankVariant::Decoupled) {
        init_rows(bank.steer, 0, n, base_embeddings, seed, 0x1000000, jitter_scale);
    }
    bank.labels.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        bank.labels[i] = "mem-" + std::to_string(i);
        bank.active.push_back(i);
    }
    double ref = 0.0;
    for (int i = 0; i < n; ++i) ref += row_norm(bank.rows, i);
    bank.init_scale = n > 0 ? S(ref / n) : S(0);
    if (n == 0) {
        // Degenerate empty bank still needs a sane fallback scale.
        std::vector<S> tmp;
        Mat<S> one(1, d);
        init_rows(one, 0, 1, base_embeddings, seed, 0x2000000, 0.0);
        bank.init_scale = S(row_norm(one, 0));
    }
    return bank;
}

template <class S>
std::vector<TokenId> extend_bank(MemoryBank<S>& bank, int n_new, const Mat<S>& base_embeddings) {
    if (n_new < 0) throw InputError("extend_bank: negative row count");
    if (base_embeddings.cols != bank.dim) throw InputError("extend_bank: embedding width mismatch");
    const int old_l = bank.size();
    Mat<S> grown(old_l + n_new, bank.dim);
    std::memcpy(grown.a.data(), bank.rows.a.data(), bank.rows.a.size() * sizeof(S));
    init_rows(grown, old_l, old_l + n_new, base_embeddings, bank.seed,
              0x10000 + static_cast<uint64_t>(old_l), 1e-3);
    bank.rows = std::move(grown);
    if (bank.variant == BankVariant::Decoupled) {
        Mat<S> grown_steer(old_l + n_new, bank.dim);
        std::memcpy(grown_steer.a.data(), bank.steer.a.data(), bank.steer.a.size() * sizeof(S));
        init_rows(grown_steer, old_l, old_l + n_new, base_embeddings, bank.seed,
                  0x1010000 + static_cast<uint64_t>(old_l), 1e-3);
        bank.steer = std::move(grown_steer);
    }
    // Rotate lifecycle: everything that was active retires.
    bank.inactive.insert(bank.inactive.end(), bank.active.begin(), bank.active.end());
    std::sort(bank.inactive.begin(), bank.inactive.end());
    bank.active.clear();
    std::vector<TokenId> fresh;
    for (int i = old_l; i < old_l + n_new; ++i) {
        bank.active.push_back(i);
        bank.labels.push_back("mem-" + std::to_string(i));
        fresh.push_back(bank.token_of_row(i));
    }
    return fresh;
}

template <class S>
RenormReport renormalize(MemoryBank<S>& bank, S eps) {
    RenormReport rep;
    double ref;
    if (!bank.inactive.empty()) {
        double acc = 0.0;
        for (int i : bank.inactive) acc += row_norm(bank.rows, i);
        ref = acc / static_cast<double>(bank.inactive.size());
    } else {
        ref = static_cast<double>(bank.init_scale);
    }
    rep.reference = ref;
    for (int i : bank.active) {
        const double n = row_norm(bank.rows, i);
        if (n == 0.0) {
            ++rep.skipped_zero_norm;
            continue;
        }
        const S factor = S(ref) / (S(n) + eps);
        S* r = bank.rows.row(i);
        for (int j = 0; j < bank.dim; ++j) r[j] *= factor;
        ++rep.rescaled;
        ++bank.renorm_rows_touched;
    }
    return rep;
}

// ----------------------------- persistence -----------------------------

namespace {
constexpr char kBankMagic[8] = {'T', 'K', 'M', 'B', 'A', 'N', 'K', '\0'};
constexpr uint32_t kBankVersion = 1;
}  // namespace

void write_bank(const MemoryBank<float>& bank, const std::string& path) {
    bank.validate();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_bank: cannot open " + path);
    f.write(kBankMagic, sizeof(kBankMagic));
    io::put_u32(f, kBankVersion);
    io::put_u32(f, static_cast<uint32_t>(bank.size()));
    io::put_u32(f, static_cast<uint32_t>(bank.dim));
    io::put_u32(f, static_cast<uint32_t>(bank.variant));
    io::put_u32(f, static_cast<uint32_t>(bank.first_token_id));
    io::put_f32(f, bank.eps);
    io::put_f32(f, bank.init_scale);
    io::put_u64(f, bank.seed);
    io::put_f32_array(f, bank.rows.a.data(), bank.rows.a.size());
    if (bank.variant == BankVariant::Decoupled) {
        io::put_f32_array(f, bank.steer.a.data(), bank.steer.a.size());
    }
    for (const auto& label : bank.labels) {
        io::put_u32(f, static_cast<uint32_t>(label.size()));
        f.write(label.data(), static_cast<std::streamsize>(label.size()));
    }
    io::put_u32(f, static_cast<uint32_t>(bank.active.size()));
    for (int i : bank.active) io::put_u32(f, static_cast<uint32_t>(i));
    io::put_u32(f, static_cast<uint32_t>(bank.inactive.size()));
    for (int i : bank.inactive) io::put_u32(f, static_cast<uint32_t>(i));
    if (!f) throw IoError("write_bank: write failed for " + path);
}

MemoryBank<float> read_bank(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_bank: cannot open " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kBankMagic, sizeof(magic)) != 0)
        throw FormatError("read_bank: bad magic in " + path);
    const uint32_t version = io::get_u32(f);
    if (version != kBankVersion)
        throw FormatError("read_bank: unsupported version " + std::to_string(version));
    MemoryBank<float> bank;
    const uint32_t l = io::get_u32(f);
    bank.dim = static_cast<int>(io::get_u32(f));
    const uint32_t variant = io::get_u32(f);
    if (variant > 1) throw FormatError("read_bank: bad variant flag");
    bank.variant = static_cast<BankVariant>(variant);
    bank.first_token_id = static_cast<TokenId>(io::get_u32(f));
    bank.eps = io::get_f32(f);
    bank.init_scale = io::get_f32(f);
    bank.seed = io::get_u64(f);
    bank.rows = Mat<float>(static_cast<int>(l), bank.dim);
    io::get_f32_array(f, bank.rows.a.data(), bank.rows.a.size());
    if (bank.variant == BankVariant::Decoupled) {
        bank.steer = Mat<float>(static_cast<int>(l), bank.dim);
        io::get_f32_array(f, bank.steer.a.data(), bank.steer.a.size());
    }
    bank.labels.resize(l);
    for (auto& label : bank.labels) {
        const uint32_t n = io::get_u32(f);
        if (n > (1u << 20)) throw FormatError("read_bank: label too long");
        label.resize(n);
        f.read(label.data(), n);
    }
    const uint32_t na = io::get_u32(f);
    if (na > l) throw FormatError("read_bank: active set too large");
    for (uint32_t i = 0; i < na; ++i) bank.active.push_back(static_cast<int>(io::get_u32(f)));
    const uint32_t ni = io::get_u32(f);
    if (ni > l) throw FormatError("read_bank: inactive set too large");
    for (uint32_t i = 0; i < ni; ++i) bank.inactive.push_back(static_cast<int>(io::get_u32(f)));
    if (!f) throw FormatError("read_bank: truncated file " + path);
    bank.validate();
    return bank;
}

#define TOKMEM_INST_BANK(S)                                                          \
    template struct MemoryBank<S>;                                                   \
    template MemoryBank<S> create_bank<S>(int, int, const Mat<S>&, uint64_t,         \
                                          BankVariant, TokenId, double);             \
    template std::vector<TokenId> extend_bank<S>(MemoryBank<S>&, int, const Mat<S>&); \
    template RenormReport renormalize<S>(MemoryBank<S>&, S);

TOKMEM_INST_BANK(float)
TOKMEM_INST_BANK(double)
#undef TOKMEM_INST_BANK

}  // namespace tokmem
