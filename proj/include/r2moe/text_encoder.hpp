#pragma once

#include "r2moe/numerics.hpp"

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace r2moe {

/// Base words followed by reserved concept-token slots "V*1", "V*2", ...
class Vocabulary {
public:
    Vocabulary(std::vector<std::string> base_words, int concept_capacity);

    static std::vector<std::string> default_base_words();
    static std::string concept_token(int concept_index) { return "V*" + std::to_string(concept_index); }

    int size() const { return static_cast<int>(tokens_.size()); }
    int base_count() const { return base_count_; }
    int concept_capacity() const { return size() - base_count_; }

    int id(const std::string& token) const;
    const std::string& token(int id) const;
    bool contains(const std::string& token) const { return index_.count(token) != 0; }
    bool is_concept(int id) const { return id >= base_count_ && id < size(); }
    /// 1-based concept index for a concept-token id.
    int concept_index(int id) const { return id - base_count_ + 1; }
    int concept_id(int concept_index) const { return base_count_ + concept_index - 1; }

    /// Whitespace tokenization; unknown words throw LookupError.
    std::vector<int> tokenize(const std::string& prompt) const;
    std::string detokenize(const std::vector<int>& ids) const;

    const std::vector<std::string>& base_words() const { return base_words_; }

private:
    std::vector<std::string> base_words_;
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    int base_count_ = 0;
};

/// Frozen base rows plus one row per registered concept; only the current task's concept row trains.
class TokenEmbeddingTable {
public:
    TokenEmbeddingTable() = default;
    TokenEmbeddingTable(const Vocabulary& vocab, int d_in, std::uint64_t seed);
    TokenEmbeddingTable(Mat base_rows, std::vector<RowVec> concept_rows, int capacity);

    int d_in() const { return static_cast<int>(base_.cols()); }
    int registered() const { return static_cast<int>(concepts_.size()); }
    int capacity() const { return capacity_; }

    /// Initializes the next concept row from the class word plus noise_scale * N(0, I).
    /// Returns the concept-token id.
    int register_concept(const Vocabulary& vocab, const std::string& class_word, std::uint64_t seed,
                         double noise_scale = 0.01);

    /// Pure lookup: row i is the embedding of token i.
    Mat encode(const std::vector<int>& ids) const;
    RowVec row(int id) const;

    /// Sum of dC rows belonging to the given concept-token id.
    static RowVec concept_gradient(const std::vector<int>& ids, const Mat& d_context, int token_id);

    /// Updates concept row `concept_index`; throws StateError if that row is frozen.
    void update_concept(int concept_index, const RowVec& delta);
    void set_concept(int concept_index, const RowVec& value);
    void freeze_concept(int concept_index);
    bool concept_trainable(int concept_index) const;

    const Mat& base_rows() const { return base_; }
    const std::vector<RowVec>& concept_rows() const { return concepts_; }
    const std::vector<bool>& concept_frozen() const { return frozen_; }
    void set_frozen_flags(std::vector<bool> flags);

private:
    Mat base_;
    std::vector<RowVec> concepts_;
    std::vector<bool> frozen_;
    int capacity_ = 0;
};

/// Write-once store of per-concept text-embedding snapshots used by routing distillation.
class ConceptEmbeddingBank {
public:
    void snapshot(int concept_index, Mat embedding);
    const Mat& at(int concept_index) const;
    bool contains(int concept_index) const { return entries_.count(concept_index) != 0; }
    int size() const { return static_cast<int>(entries_.size()); }
    const std::map<int, Mat>& entries() const { return entries_; }

private:
    std::map<int, Mat> entries_;
};

}  // namespace r2moe
