#pragma once
// Character-level corpus handling: tokenizer, tab-separated corpus files,
// toy seq2seq task generators and source/target batching.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mdsq {

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kBosId = 1;
inline constexpr std::size_t kEosId = 2;
inline constexpr std::size_t kMaskId = 3;
inline constexpr std::size_t kFirstCharId = 4;

std::u32string utf8_decode(std::string_view text);
std::string utf8_encode(std::u32string_view text);

class Vocab {
public:
    Vocab() = default;
    // Characters are deduplicated and sorted; ids start at kFirstCharId.
    static Vocab from_alphabet(std::u32string alphabet);

    std::size_t size() const noexcept { return kFirstCharId + alphabet_.size(); }
    const std::u32string& alphabet() const noexcept { return alphabet_; }

    std::size_t id_of(char32_t c) const;
    char32_t char_of(std::size_t id) const;
    std::vector<std::size_t> encode(std::string_view utf8) const;
    // Reserved ids are skipped.
    std::string decode(std::span<const std::size_t> ids) const;

private:
    std::u32string alphabet_;
    std::unordered_map<char32_t, std::size_t> ids_;
};

struct TextPair {
    std::string source;
    std::string target;
    bool operator==(const TextPair&) const = default;
};

Vocab vocab_from_corpus(std::span<const TextPair> pairs);

// One "source<TAB>target" pair per line; blank lines skipped.
std::vector<TextPair> parse_corpus(std::string_view text);
std::vector<TextPair> load_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, std::span<const TextPair> pairs);

enum class ToyTask { kCopy, kReverse, kSort };
ToyTask parse_toy_task(std::string_view name);
std::string_view toy_task_name(ToyTask task);

// Lowercase letters available to a toy task with this vocabulary size.
std::u32string toy_alphabet(std::size_t vocab_size);
std::string apply_toy_task(ToyTask task, std::string_view source);
std::vector<TextPair> make_toy_task(ToyTask task, std::size_t n_pairs, std::size_t min_len, std::size_t max_len,
                                    std::size_t vocab_size, std::uint64_t seed);

// Rows laid out as [bos, source..., eos, target..., pad...].
struct Batch {
    std::size_t batch_size = 0;
    std::size_t seq_len = 0;
    std::vector<std::size_t> ids;
    std::vector<std::uint8_t> source_mask;
    std::vector<std::uint8_t> pad_mask;

    std::span<const std::size_t> row_ids(std::size_t b) const { return {ids.data() + b * seq_len, seq_len}; }
    std::span<const std::uint8_t> row_source(std::size_t b) const { return {source_mask.data() + b * seq_len, seq_len}; }
    std::span<const std::uint8_t> row_pad(std::size_t b) const { return {pad_mask.data() + b * seq_len, seq_len}; }
    // Number of non-pad positions in row b.
    std::size_t length(std::size_t b) const;
    std::size_t source_length(std::size_t b) const;
};

std::vector<std::size_t> encode_source(const Vocab& vocab, std::string_view source);
std::size_t encoded_length(const Vocab& vocab, const TextPair& pair);

// Pairs keep their order; the last batch may be smaller. Throws LengthError
// naming the first pair that does not fit max_seq_len.
std::vector<Batch> batchify(std::span<const TextPair> pairs, const Vocab& vocab, std::size_t max_seq_len,
                            std::size_t batch_size);

std::string detokenize_source(const Batch& batch, std::size_t b, const Vocab& vocab);
std::string detokenize_target(const Batch& batch, std::size_t b, const Vocab& vocab);

} // namespace mdsq
