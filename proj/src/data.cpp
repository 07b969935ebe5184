#include "mdsq/data.hpp"

#include "mdsq/error.hpp"
#include "mdsq/rng.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace mdsq {

std::u32string utf8_decode(std::string_view text)
{
    std::u32string out;
    std::size_t i = 0;
    while (i < text.size()) {
        const auto b0 = static_cast<unsigned char>(text[i]);
        std::size_t len = 0;
        char32_t cp = 0;
        if (b0 < 0x80) {
            len = 1;
            cp = b0;
        } else if ((b0 & 0xE0) == 0xC0) {
            len = 2;
            cp = b0 & 0x1F;
        } else if ((b0 & 0xF0) == 0xE0) {
            len = 3;
            cp = b0 & 0x0F;
        } else if ((b0 & 0xF8) == 0xF0) {
            len = 4;
            cp = b0 & 0x07;
        } else {
            throw EncodingError("invalid UTF-8 lead byte at offset " + std::to_string(i));
        }
        if (i + len > text.size())
            throw EncodingError("truncated UTF-8 sequence at offset " + std::to_string(i));
        for (std::size_t k = 1; k < len; ++k) {
            const auto b = static_cast<unsigned char>(text[i + k]);
            if ((b & 0xC0) != 0x80)
                throw EncodingError("invalid UTF-8 continuation byte at offset " + std::to_string(i + k));
            cp = (cp << 6) | (b & 0x3F);
        }
        static constexpr char32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
        if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF))
            throw EncodingError("invalid UTF-8 code point at offset " + std::to_string(i));
        out.push_back(cp);
        i += len;
    }
    return out;
}

std::string utf8_encode(std::u32string_view text)
{
    std::string out;
    for (char32_t c : text) {
        if (c < 0x80) {
            out.push_back(static_cast<char>(c));
        } else if (c < 0x800) {
            out.push_back(static_cast<char>(0xC0 | (c >> 6)));
            out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
        } else if (c < 0x10000) {
            out.push_back(static_cast<char>(0xE0 | (c >> 12)));
            out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
        } else {
            out.push_back(static_cast<char>(0xF0 | (c >> 18)));
            out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
        }
    }
    return out;
}

// ---- Vocab ----------------------------------------------------------------

Vocab Vocab::from_alphabet(std::u32string alphabet)
{
    std::sort(alphabet.begin(), alphabet.end());
    alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());
    Vocab v;
    v.alphabet_ = std::move(alphabet);
    for (std::size_t i = 0; i < v.alphabet_.size(); ++i)
        v.ids_.emplace(v.alphabet_[i], kFirstCharId + i);
    return v;
}

std::size_t Vocab::id_of(char32_t c) const
{
    auto it = ids_.find(c);
    if (it == ids_.end())
        throw VocabularyError("character U+" + std::to_string(static_cast<std::uint32_t>(c)) + " not in vocabulary");
    return it->second;
}

char32_t Vocab::char_of(std::size_t id) const
{
    if (id < kFirstCharId || id >= size())
        throw VocabularyError("id " + std::to_string(id) + " is not a character id");
    return alphabet_[id - kFirstCharId];
}

std::vector<std::size_t> Vocab::encode(std::string_view utf8) const
{
    std::vector<std::size_t> ids;
    for (char32_t c : utf8_decode(utf8))
        ids.push_back(id_of(c));
    return ids;
}

std::string Vocab::decode(std::span<const std::size_t> ids) const
{
    std::u32string out;
    for (std::size_t id : ids)
        if (id >= kFirstCharId && id < size())
            out.push_back(alphabet_[id - kFirstCharId]);
    return utf8_encode(out);
}

Vocab vocab_from_corpus(std::span<const TextPair> pairs)
{
    std::u32string chars;
    for (const TextPair& p : pairs) {
        chars += utf8_decode(p.source);
        chars += utf8_decode(p.target);
    }
    return Vocab::from_alphabet(std::move(chars));
}

// ---- corpus files -----------------------------------------------------------

std::vector<TextPair> parse_corpus(std::string_view text)
{
    std::vector<TextPair> pairs;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos)
            end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r')
            line.remove_suffix(1);
        if (line.empty())
            continue;
        try {
            utf8_decode(line);
        } catch (const EncodingError& e) {
            throw EncodingError("line " + std::to_string(line_no) + ": " + e.what());
        }
        const std::size_t tab = line.find('\t');
        if (tab == std::string_view::npos)
            throw LineFormatError("line " + std::to_string(line_no) + ": expected source<TAB>target");
        pairs.push_back({std::string(line.substr(0, tab)), std::string(line.substr(tab + 1))});
    }
    return pairs;
}

std::vector<TextPair> load_corpus(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open corpus " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_corpus(buf.str());
}

void write_corpus(const std::filesystem::path& path, std::span<const TextPair> pairs)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot write corpus " + path.string());
    for (const TextPair& p : pairs)
        out << p.source << '\t' << p.target << '\n';
}

// ---- toy tasks --------------------------------------------------------------

ToyTask parse_toy_task(std::string_view name)
{
    if (name == "copy")
        return ToyTask::kCopy;
    if (name == "reverse")
        return ToyTask::kReverse;
    if (name == "sort")
        return ToyTask::kSort;
    throw ConfigError("unknown toy task '" + std::string(name) + "' (copy|reverse|sort)");
}

std::string_view toy_task_name(ToyTask task)
{
    switch (task) {
    case ToyTask::kCopy:
        return "copy";
    case ToyTask::kReverse:
        return "reverse";
    case ToyTask::kSort:
        return "sort";
    }
    return "?";
}

std::u32string toy_alphabet(std::size_t vocab_size)
{
    if (vocab_size < kFirstCharId + 1)
        throw ConfigError("toy vocabulary needs at least " + std::to_string(kFirstCharId + 1) + " ids");
    const std::size_t letters = std::min<std::size_t>(vocab_size - kFirstCharId, 26);
    std::u32string a;
    for (std::size_t i = 0; i < letters; ++i)
        a.push_back(U'a' + static_cast<char32_t>(i));
    return a;
}

std::string apply_toy_task(ToyTask task, std::string_view source)
{
    std::u32string s = utf8_decode(source);
    switch (task) {
    case ToyTask::kCopy:
        break;
    case ToyTask::kReverse:
        std::reverse(s.begin(), s.end());
        break;
    case ToyTask::kSort:
        std::sort(s.begin(), s.end());
        break;
    }
    return utf8_encode(s);
}

std::vector<TextPair> make_toy_task(ToyTask task, std::size_t n_pairs, std::size_t min_len, std::size_t max_len,
                                    std::size_t vocab_size, std::uint64_t seed)
{
    if (min_len < 1 || min_len > max_len)
        throw ConfigError("toy task length range must satisfy 1 <= min <= max");
    const std::u32string alphabet = toy_alphabet(vocab_size);
    Rng rng(seed);
    std::vector<TextPair> pairs;
    pairs.reserve(n_pairs);
    for (std::size_t i = 0; i < n_pairs; ++i) {
        const std::size_t len = rng.uniform_int(min_len, max_len);
        std::u32string s;
        for (std::size_t k = 0; k < len; ++k)
            s.push_back(alphabet[rng.uniform_int(0, alphabet.size() - 1)]);
        std::string src = utf8_encode(s);
        pairs.push_back({src, apply_toy_task(task, src)});
    }
    return pairs;
}

// ---- batching ---------------------------------------------------------------

std::size_t Batch::length(std::size_t b) const
{
    const auto pad = row_pad(b);
    return static_cast<std::size_t>(std::count(pad.begin(), pad.end(), std::uint8_t{0}));
}

std::size_t Batch::source_length(std::size_t b) const
{
    const auto src = row_source(b);
    return static_cast<std::size_t>(std::count(src.begin(), src.end(), std::uint8_t{1}));
}

std::vector<std::size_t> encode_source(const Vocab& vocab, std::string_view source)
{
    std::vector<std::size_t> ids{kBosId};
    for (std::size_t id : vocab.encode(source))
        ids.push_back(id);
    ids.push_back(kEosId);
    return ids;
}

std::size_t encoded_length(const Vocab& vocab, const TextPair& pair)
{
    return encode_source(vocab, pair.source).size() + vocab.encode(pair.target).size();
}

std::vector<Batch> batchify(std::span<const TextPair> pairs, const Vocab& vocab, std::size_t max_seq_len,
                            std::size_t batch_size)
{
    if (batch_size == 0)
        throw ConfigError("batch size must be >= 1");
    std::vector<std::vector<std::size_t>> rows;
    std::vector<std::size_t> src_lens;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        std::vector<std::size_t> ids = encode_source(vocab, pairs[i].source);
        const std::size_t src_len = ids.size();
        const std::vector<std::size_t> tgt = vocab.encode(pairs[i].target);
        if (tgt.empty())
            throw BatchError("pair " + std::to_string(i) + " has an empty target");
        ids.insert(ids.end(), tgt.begin(), tgt.end());
        if (ids.size() > max_seq_len)
            throw LengthError("pair " + std::to_string(i) + " encodes to " + std::to_string(ids.size()) +
                              " tokens, limit " + std::to_string(max_seq_len));
        rows.push_back(std::move(ids));
        src_lens.push_back(src_len);
    }
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < rows.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, rows.size() - start);
        Batch b;
        b.batch_size = n;
        b.seq_len = max_seq_len;
        b.ids.assign(n * max_seq_len, kPadId);
        b.source_mask.assign(n * max_seq_len, 0);
        b.pad_mask.assign(n * max_seq_len, 1);
        for (std::size_t r = 0; r < n; ++r) {
            const auto& ids = rows[start + r];
            for (std::size_t j = 0; j < ids.size(); ++j) {
                b.ids[r * max_seq_len + j] = ids[j];
                b.pad_mask[r * max_seq_len + j] = 0;
                b.source_mask[r * max_seq_len + j] = j < src_lens[start + r] ? 1 : 0;
            }
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

std::string detokenize_source(const Batch& batch, std::size_t b, const Vocab& vocab)
{
    std::vector<std::size_t> ids;
    for (std::size_t j = 0; j < batch.seq_len; ++j)
        if (batch.row_source(b)[j])
            ids.push_back(batch.row_ids(b)[j]);
    return vocab.decode(ids);
}

std::string detokenize_target(const Batch& batch, std::size_t b, const Vocab& vocab)
{
    std::vector<std::size_t> ids;
    for (std::size_t j = 0; j < batch.seq_len; ++j)
        if (!batch.row_source(b)[j] && !batch.row_pad(b)[j])
            ids.push_back(batch.row_ids(b)[j]);
    return vocab.decode(ids);
}

} // namespace mdsq
