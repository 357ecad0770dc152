#include "support.hpp"

#include "r2moe/text_encoder.hpp"

#include <gtest/gtest.h>

using namespace r2moe;
using namespace r2moe::testing;

namespace {

Vocabulary vocab() { return Vocabulary(Vocabulary::default_base_words(), 4); }

}  // namespace

TEST(Vocabulary, ConceptSlotsFollowBaseWords)
{
    const Vocabulary v = vocab();
    EXPECT_EQ(v.concept_capacity(), 4);
    EXPECT_EQ(v.id("V*1"), v.base_count());
    EXPECT_TRUE(v.is_concept(v.id("V*3")));
    EXPECT_FALSE(v.is_concept(v.id("disk")));
    EXPECT_EQ(v.concept_index(v.id("V*2")), 2);
    EXPECT_GE(v.base_count(), 60);
}

TEST(Vocabulary, RejectsCollisionsAndDuplicates)
{
    EXPECT_THROW(Vocabulary({"a", "a"}, 1), DomainError);
    EXPECT_THROW(Vocabulary({"a", "V*1"}, 1), DomainError);
}

TEST(Vocabulary, TokenizeRoundTripAndUnknownWord)
{
    const Vocabulary v = vocab();
    const auto ids = v.tokenize("photo of a V*2 disk");
    EXPECT_EQ(v.detokenize(ids), "photo of a V*2 disk");
    EXPECT_THROW(v.tokenize("photo of a zebra"), LookupError);
}

TEST(Encode, SingleTokenIsItsRow)
{
    const Vocabulary v = vocab();
    const TokenEmbeddingTable t(v, 8, 3);
    const Mat c = t.encode({v.id("disk")});
    ASSERT_EQ(c.rows(), 1);
    EXPECT_EQ(RowVec(c.row(0)), RowVec(t.base_rows().row(v.id("disk"))));
}

TEST(Encode, Deterministic)
{
    const Vocabulary v = vocab();
    const TokenEmbeddingTable t(v, 8, 3);
    const auto ids = v.tokenize("photo of a ring");
    EXPECT_EQ(t.encode(ids), t.encode(ids));
}

TEST(Encode, NaiveGatherOracle)
{
    const Vocabulary v = vocab();
    const TokenEmbeddingTable t(v, 8, 3);
    const std::vector<int> ids{5, 17, 2, 17};
    const Mat c = t.encode(ids);
    const Mat& base = t.base_rows();
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 8; ++j)
            EXPECT_EQ(c(i, j), base(ids[static_cast<std::size_t>(i)], j));
}

TEST(Encode, UnknownIdThrows)
{
    const Vocabulary v = vocab();
    const TokenEmbeddingTable t(v, 8, 3);
    EXPECT_THROW(t.encode({v.id("V*1")}), LookupError);  // slot not registered yet
    EXPECT_THROW(t.encode({-1}), LookupError);
    EXPECT_THROW(t.encode({}), DomainError);
}

TEST(RegisterConcept, ZeroNoiseCopiesClassWord)
{
    const Vocabulary v = vocab();
    TokenEmbeddingTable t(v, 8, 3);
    const int id = t.register_concept(v, "square", 11, 0.0);
    EXPECT_EQ(id, v.id("V*1"));
    EXPECT_EQ(t.row(id), RowVec(t.base_rows().row(v.id("square"))));
    EXPECT_TRUE(t.concept_trainable(1));
}

TEST(RegisterConcept, SeedSensitive)
{
    const Vocabulary v = vocab();
    TokenEmbeddingTable t(v, 8, 3);
    const int a = t.register_concept(v, "square", 11);
    const int b = t.register_concept(v, "square", 12);
    EXPECT_NE(t.row(a), t.row(b));
}

TEST(RegisterConcept, CapacityError)
{
    const Vocabulary v = vocab();
    TokenEmbeddingTable t(v, 8, 3);
    for (int i = 0; i < 4; ++i)
        t.register_concept(v, "disk", static_cast<std::uint64_t>(i));
    EXPECT_THROW(t.register_concept(v, "disk", 9), CapacityError);
}

TEST(RegisterConcept, FrozenRowRejectsUpdates)
{
    const Vocabulary v = vocab();
    TokenEmbeddingTable t(v, 8, 3);
    t.register_concept(v, "disk", 1);
    t.update_concept(1, RowVec::Ones(8));
    t.freeze_concept(1);
    EXPECT_THROW(t.update_concept(1, RowVec::Ones(8)), StateError);
    EXPECT_THROW(t.set_concept(1, RowVec::Ones(8)), StateError);
}

TEST(ConceptGradient, SumsMatchingRows)
{
    const Mat d{{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}};
    const RowVec g = TokenEmbeddingTable::concept_gradient({7, 9, 7}, d, 7);
    EXPECT_EQ(g, RowVec({{6.0, 8.0}}));
}

TEST(ConceptBank, WriteOnce)
{
    ConceptEmbeddingBank bank;
    bank.snapshot(1, Mat::Ones(2, 3));
    EXPECT_THROW(bank.snapshot(1, Mat::Zero(2, 3)), StateError);
    EXPECT_EQ(bank.at(1), Mat::Ones(2, 3));
    EXPECT_THROW(bank.at(2), StateError);
}

TEST(ConceptBank, SequenceBookkeepingAndFreezing)
{
    LifelongState state = tiny_state();
    const auto tasks = tiny_tasks(3);
    const Mat base_before = state.table.base_rows();
    std::vector<Mat> encodings;
    bool bank_ordered = true;
    run_sequence(state, tasks, tiny_train(4), 21, [&](const LifelongState& s, const TaskReport& r) {
        bank_ordered = bank_ordered && s.bank.size() == r.task && s.bank.contains(r.task);
        encodings.push_back(s.table.encode(s.task(r.task).prompt_ids));
    });
    EXPECT_TRUE(bank_ordered);
    EXPECT_EQ(state.bank.size(), 3);
    EXPECT_EQ(state.table.registered(), 3);
    EXPECT_EQ(state.table.base_rows(), base_before);
    for (int tau = 1; tau <= 3; ++tau) {
        const auto& ids = state.task(tau).prompt_ids;
        EXPECT_EQ(state.table.encode(ids), state.bank.at(tau));
        EXPECT_EQ(state.bank.at(tau), encodings[static_cast<std::size_t>(tau - 1)]);
        EXPECT_FALSE(state.table.concept_trainable(tau));
    }
}
