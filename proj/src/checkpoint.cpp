#include "mdsq/checkpoint.hpp"

#include "mdsq/error.hpp"
#include "mdsq/rng.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mdsq {

namespace {

constexpr char kMagic[4] = {'M', 'D', 'S', 'Q'};
constexpr std::string_view kHashKey = "# model_hash = ";

template <typename U>
void put_le(std::string& out, U v)
{
    for (std::size_t i = 0; i < sizeof(U); ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    bool done() const { return pos_ == bytes_.size(); }

    std::string_view take(std::size_t n, const char* what)
    {
        if (bytes_.size() - pos_ < n)
            throw IoError(std::string("checkpoint truncated while reading ") + what);
        const std::string_view out = bytes_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    template <typename U>
    U get_le(const char* what)
    {
        const std::string_view b = take(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(b[i])) << (8 * i);
        return v;
    }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt)
{
    std::string out(kMagic, sizeof kMagic);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.config_text.size()));
    out += ckpt.config_text;
    for (const auto& [name, t] : ckpt.tensors) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape())
            put_le<std::uint64_t>(out, d);
        for (double x : t.data())
            put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
    }
    return out;
}

Checkpoint parse_checkpoint(std::string_view bytes)
{
    Reader r(bytes);
    if (r.take(4, "magic") != std::string_view(kMagic, 4))
        throw IoError("not a checkpoint (bad magic)");
    const auto version = r.get_le<std::uint32_t>("version");
    if (version != kCheckpointVersion)
        throw CompatibilityError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    const auto cfg_len = r.get_le<std::uint32_t>("config length");
    ckpt.config_text = std::string(r.take(cfg_len, "config text"));
    while (!r.done()) {
        const auto name_len = r.get_le<std::uint32_t>("tensor name length");
        std::string name(r.take(name_len, "tensor name"));
        const auto rank = r.get_le<std::uint32_t>("tensor rank");
        if (rank == 0 || rank > 8)
            throw IoError("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
        Shape shape;
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape.push_back(static_cast<std::size_t>(r.get_le<std::uint64_t>("tensor dims")));
            if (shape.back() != 0 && numel > (bytes.size() / 8) / shape.back())
                throw IoError("tensor '" + name + "' is larger than the file");
            numel *= shape.back();
        }
        Tensor t(shape);
        for (double& x : t.data())
            x = std::bit_cast<double>(r.get_le<std::uint64_t>("tensor payload"));
        ckpt.tensors.emplace_back(std::move(name), std::move(t));
    }
    return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    const std::string bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size())))
        throw IoError("cannot write checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot read checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_checkpoint(ss.str());
}

Checkpoint make_checkpoint(const DenoiserModel& model, const RunConfig& config)
{
    Checkpoint ckpt;
    ckpt.config_text = config.to_text() + std::string(kHashKey) + std::to_string(config.model_hash()) + "\n";
    for (const NamedConstTensor& p : model.named_parameters())
        ckpt.tensors.emplace_back(p.name, *p.tensor);
    return ckpt;
}

void save_model(const std::filesystem::path& path, const DenoiserModel& model, const RunConfig& config)
{
    write_checkpoint(path, make_checkpoint(model, config));
}

LoadedModel model_from_checkpoint(const Checkpoint& ckpt)
{
    LoadedModel out;
    out.config = RunConfig::from_text(ckpt.config_text);
    const auto at = ckpt.config_text.find(kHashKey);
    if (at != std::string::npos) {
        const std::string stored = ckpt.config_text.substr(at + kHashKey.size(),
                                                           ckpt.config_text.find('\n', at) - at - kHashKey.size());
        if (stored != std::to_string(out.config.model_hash()))
            throw CompatibilityError("checkpoint config does not match its recorded model hash");
    }
    out.config.validate();
    Rng rng(0);
    out.model = DenoiserModel::init(out.config.model, rng);
    auto params = out.model.named_parameters();
    if (params.size() != ckpt.tensors.size())
        throw CompatibilityError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                                 std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& [name, t] = ckpt.tensors[i];
        if (name != params[i].name)
            throw CompatibilityError("checkpoint tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                                     params[i].name + "'");
        if (t.shape() != params[i].tensor->shape())
            throw CompatibilityError("tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                                     shape_str(params[i].tensor->shape()));
        *params[i].tensor = t;
    }
    return out;
}

LoadedModel load_model(const std::filesystem::path& path)
{
    return model_from_checkpoint(read_checkpoint(path));
}

void check_compatible(const RunConfig& expected, const RunConfig& stored)
{
    if (expected.model_hash() != stored.model_hash()) {
        std::string diff;
        for (const std::string& k : RunConfig::keys())
            if ((k.rfind("model.", 0) == 0 || k.rfind("vocab.", 0) == 0 || k == "schedule.T" || k == "schedule.p_max") &&
                expected.get(k) != stored.get(k))
                diff += "\n  - " + k + ": config " + expected.get(k) + ", checkpoint " + stored.get(k);
        throw CompatibilityError("config does not match checkpoint" + diff);
    }
}

} // namespace mdsq
