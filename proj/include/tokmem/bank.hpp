#pragma once

#include <string>
#include <vector>

#include "tokmem/common.hpp"

namespace tokmem {

enum class BankVariant : uint8_t { Coupled = 0, Decoupled = 1 };

// Trainable procedure-memory rows living outside the backbone vocabulary.
// Row i answers to token id first_token_id + i. `rows` holds the address
// embeddings (used by the output head); in the coupled variant the same row
// also steers generation, in the decoupled variant `steer` provides a
// separate input embedding per row.
template <class S>
struct MemoryBank {
    int dim = 0;
    TokenId first_token_id = 0;
    BankVariant variant = BankVariant::Coupled;
    S eps = S(1e-8);
    S init_scale = S(0);  // reference norm when no row is inactive yet
    uint64_t seed = 0;
    Mat<S> rows;
    Mat<S> steer;
    std::vector<std::string> labels;
    std::vector<int> active;
    std::vector<int> inactive;
    uint64_t renorm_rows_touched = 0;

    int size() const { return rows.rows; }
    bool owns_token(TokenId id) const {
        return id >= first_token_id && id < first_token_id + size();
    }
    int row_of_token(TokenId id) const { return static_cast<int>(id - first_token_id); }
    TokenId token_of_row(int i) const { return first_token_id + i; }
    const S* steer_row(int i) const {
        return variant == BankVariant::Decoupled ? steer.row(i) : rows.row(i);
    }
    Mat<S>& steer_mat() { return variant == BankVariant::Decoupled ? steer : rows; }

    void validate() const;
};

struct RenormReport {
    int rescaled = 0;
    int skipped_zero_norm = 0;
    double reference = 0.0;
};

// Rows are the mean of the base embedding rows plus a small deterministic
// jitter (scale `jitter_scale` of the mean-embedding norm). All rows start
// active.
template <class S>
MemoryBank<S> create_bank(int d, int n, const Mat<S>& base_embeddings, uint64_t seed,
                          BankVariant variant, TokenId first_token_id,
                          double jitter_scale = 1e-3);

// Appends n_new rows initialised like create_bank. Existing rows are left
// untouched bitwise; previously active rows become inactive and the new rows
// form the active set. Returns the token ids of the new rows.
template <class S>
std::vector<TokenId> extend_bank(MemoryBank<S>& bank, int n_new, const Mat<S>& base_embeddings);

// Rescales each active row to the mean L2 norm of the inactive rows
// (init_scale when there are none), preserving direction. Zero-norm rows are
// left unchanged and counted in the report. Decoupled banks renormalise the
// address rows only.
template <class S>
RenormReport renormalize(MemoryBank<S>& bank, S eps);

template <class S>
RenormReport renormalize(MemoryBank<S>& bank) {
    return renormalize(bank, bank.eps);
}

// TKMBANK container, bit-exact: little-endian header, row-major float32
// tensors (address then steer when decoupled), UTF-8 label table, then the
// active/inactive index sets.
void write_bank(const MemoryBank<float>& bank, const std::string& path);
MemoryBank<float> read_bank(const std::string& path);

#define TOKMEM_EXTERN_BANK(S)                                                               \
    extern template struct MemoryBank<S>;                                                   \
    extern template MemoryBank<S> create_bank<S>(int, int, const Mat<S>&, uint64_t,         \
                                                 BankVariant, TokenId, double);             \
    extern template std::vector<TokenId> extend_bank<S>(MemoryBank<S>&, int, const Mat<S>&); \
    extern template RenormReport renormalize<S>(MemoryBank<S>&, S);

TOKMEM_EXTERN_BANK(float)
TOKMEM_EXTERN_BANK(double)
#undef TOKMEM_EXTERN_BANK

}  // namespace tokmem
