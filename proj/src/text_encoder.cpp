#include "r2moe/text_encoder.hpp"

#include <cmath>
#include <sstream>

namespace r2moe {

Vocabulary::Vocabulary(std::vector<std::string> base_words, int concept_capacity)
    : base_words_(std::move(base_words)), base_count_(static_cast<int>(base_words_.size()))
{
    if (concept_capacity < 0)
        throw DomainError("Vocabulary: negative concept capacity");
    tokens_ = base_words_;
    for (int k = 1; k <= concept_capacity; ++k)
        tokens_.push_back(concept_token(k));
    for (int i = 0; i < size(); ++i) {
        const auto& t = tokens_[static_cast<std::size_t>(i)];
        if (t.empty())
            throw DomainError("Vocabulary: empty token");
        if (i < base_count_ && t.rfind("V*", 0) == 0)
            throw DomainError("Vocabulary: base word '" + t + "' collides with the concept-slot namespace");
        if (!index_.emplace(t, i).second)
            throw DomainError("Vocabulary: duplicate token '" + t + "'");
    }
}

std::vector<std::string> Vocabulary::default_base_words()
{
    return {
        // template and function words; "<null>" is the unconditional prompt
        "<null>", "photo", "of", "a", "an", "the", "in", "on", "with", "picture", "image", "and", "at", "near",
        // shape families
        "disk", "square", "triangle", "ring", "cross", "diamond", "bar", "frame",
        // colors
        "red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple", "white", "black", "gray",
        "brown", "pink", "teal", "olive", "navy",
        // textures
        "solid", "striped", "checkered", "dotted",
        // scenes
        "grass", "street", "sky", "wall", "sand", "water", "snow", "room",
        // filler
        "dog", "cat", "toy", "mug", "chair", "plant", "car", "house", "big", "small", "bright", "dark", "left",
        "right"};
}

int Vocabulary::id(const std::string& token) const
{
    const auto it = index_.find(token);
    if (it == index_.end())
        throw LookupError("unknown token '" + token + "'");
    return it->second;
}

const std::string& Vocabulary::token(int id) const
{
    if (id < 0 || id >= size())
        throw LookupError("token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::tokenize(const std::string& prompt) const
{
    std::istringstream in(prompt);
    std::vector<int> ids;
    for (std::string word; in >> word;)
        ids.push_back(id(word));
    return ids;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const
{
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i)
            out += ' ';
        out += token(ids[i]);
    }
    return out;
}

TokenEmbeddingTable::TokenEmbeddingTable(const Vocabulary& vocab, int d_in, std::uint64_t seed)
    : capacity_(vocab.concept_capacity())
{
    Rng rng(seed);
    base_ = rng.gaussian(vocab.base_count(), d_in, 1.0 / std::sqrt(static_cast<double>(d_in)));
}

TokenEmbeddingTable::TokenEmbeddingTable(Mat base_rows, std::vector<RowVec> concept_rows, int capacity)
    : base_(std::move(base_rows)), concepts_(std::move(concept_rows)), frozen_(concepts_.size(), true),
      capacity_(capacity)
{
}

int TokenEmbeddingTable::register_concept(const Vocabulary& vocab, const std::string& class_word,
                                          std::uint64_t seed, double noise_scale)
{
    if (registered() >= capacity_)
        throw CapacityError("no free concept-token slot (capacity " + std::to_string(capacity_) + ")");
    const int word = vocab.id(class_word);
    if (vocab.is_concept(word))
        throw LookupError("class word must be a base word, got '" + class_word + "'");
    Rng rng(seed);
    RowVec r = base_.row(word);
    if (noise_scale != 0.0)
        r += rng.gaussian(1, d_in(), noise_scale);
    concepts_.push_back(r);
    frozen_.push_back(false);
    return vocab.concept_id(registered());
}

RowVec TokenEmbeddingTable::row(int id) const
{
    if (id < 0)
        throw LookupError("negative token id");
    if (id < base_.rows())
        return base_.row(id);
    const auto k = static_cast<std::size_t>(id - base_.rows());
    if (k >= concepts_.size())
        throw LookupError("token id " + std::to_string(id) + " has no embedding row");
    return concepts_[k];
}

Mat TokenEmbeddingTable::encode(const std::vector<int>& ids) const
{
    if (ids.empty())
        throw DomainError("encode: empty prompt");
    Mat c(static_cast<Eigen::Index>(ids.size()), d_in());
    for (std::size_t i = 0; i < ids.size(); ++i)
        c.row(static_cast<Eigen::Index>(i)) = row(ids[i]);
    return c;
}

RowVec TokenEmbeddingTable::concept_gradient(const std::vector<int>& ids, const Mat& d_context, int token_id)
{
    RowVec g = RowVec::Zero(d_context.cols());
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == token_id)
            g += d_context.row(static_cast<Eigen::Index>(i));
    return g;
}

void TokenEmbeddingTable::update_concept(int concept_index, const RowVec& delta)
{
    if (!concept_trainable(concept_index))
        throw StateError("concept row " + std::to_string(concept_index) + " is frozen");
    concepts_[static_cast<std::size_t>(concept_index - 1)] += delta;
}

void TokenEmbeddingTable::set_concept(int concept_index, const RowVec& value)
{
    if (!concept_trainable(concept_index))
        throw StateError("concept row " + std::to_string(concept_index) + " is frozen");
    if (value.size() != d_in())
        throw ShapeError("concept row width mismatch");
    concepts_[static_cast<std::size_t>(concept_index - 1)] = value;
}

void TokenEmbeddingTable::freeze_concept(int concept_index)
{
    if (concept_index < 1 || concept_index > registered())
        throw LookupError("no concept " + std::to_string(concept_index));
    frozen_[static_cast<std::size_t>(concept_index - 1)] = true;
}

bool TokenEmbeddingTable::concept_trainable(int concept_index) const
{
    if (concept_index < 1 || concept_index > registered())
        throw LookupError("no concept " + std::to_string(concept_index));
    return !frozen_[static_cast<std::size_t>(concept_index - 1)];
}

void TokenEmbeddingTable::set_frozen_flags(std::vector<bool> flags)
{
    if (flags.size() != concepts_.size())
        throw ShapeError("frozen flag count mismatch");
    frozen_ = std::move(flags);
}

void ConceptEmbeddingBank::snapshot(int concept_index, Mat embedding)
{
    if (contains(concept_index))
        throw StateError("concept " + std::to_string(concept_index) + " already snapshotted");
    entries_.emplace(concept_index, std::move(embedding));
}

const Mat& ConceptEmbeddingBank::at(int concept_index) const
{
    const auto it = entries_.find(concept_index);
    if (it == entries_.end())
        throw StateError("no embedding snapshot for concept " + std::to_string(concept_index));
    return it->second;
}

}  // namespace r2moe
