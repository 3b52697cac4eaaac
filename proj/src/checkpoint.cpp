#include "phydi/errors.hpp"
#include "phydi/models.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace phydi {

namespace {

constexpr char kMagic[8] = {'P', 'H', 'Y', 'D', 'I', 'C', 'K', 'P'};

class Writer {
public:
    void bytes(const void* data, std::size_t size) {
        const auto* p = static_cast<const char*>(data);
        buf_.insert(buf_.end(), p, p + size);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    const std::vector<char>& buffer() const { return buf_; }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(std::string data) : data_(std::move(data)) {}

    void bytes(void* out, std::size_t size, const char* what) {
        need(size, what);
        std::memcpy(out, data_.data() + pos_, size);
        pos_ += size;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
    std::string str(const char* what) {
        const std::uint64_t size = u64(what);
        need(size, what);
        std::string s = data_.substr(pos_, size);
        pos_ += size;
        return s;
    }
    bool at_end() const { return pos_ == data_.size(); }

private:
    void need(std::uint64_t size, const char* what) const {
        if (size > data_.size() - pos_) {
            throw FormatError(std::string("checkpoint truncated while reading ") + what);
        }
    }

    std::string data_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    Writer w;
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kCheckpointVersion);
    KeyValueConfig kv;
    model.config().to_kv(kv);
    w.str(kv.to_text());

    const auto& entries = model.parameters().entries();
    w.u64(entries.size());
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        w.str(e.name);
        w.u32(static_cast<std::uint32_t>(e.tensor.rank()));
        for (std::size_t d : e.tensor.shape()) w.u64(d);
        w.u64(offset);
        offset += e.tensor.numel();
    }
    w.u64(offset);
    for (const auto& e : entries) {
        for (double v : e.tensor.data()) w.f64(v);
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    Reader r(buf.str());

    char magic[8];
    r.bytes(magic, sizeof magic, "magic");
    if (std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw FormatError(path.string() + " is not a checkpoint");
    }
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    ModelConfig config;
    try {
        config = ModelConfig::from_kv(KeyValueConfig::parse(r.str("config"), path.string()));
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint config invalid: ") + e.what());
    }

    struct Record {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    const std::uint64_t count = r.u64("table size");
    std::vector<Record> table;
    for (std::uint64_t i = 0; i < count; ++i) {
        Record rec;
        rec.name = r.str("parameter name");
        const std::uint32_t rank = r.u32("rank");
        for (std::uint32_t k = 0; k < rank; ++k) rec.shape.push_back(r.u64("shape"));
        rec.offset = r.u64("offset");
        table.push_back(std::move(rec));
    }
    const std::uint64_t total = r.u64("value count");
    std::vector<double> values;
    values.reserve(std::min<std::uint64_t>(total, 1u << 24));
    for (std::uint64_t i = 0; i < total; ++i) values.push_back(r.f64("values"));
    if (!r.at_end()) throw FormatError("checkpoint has trailing bytes");

    std::unique_ptr<Model> model;
    try {
        model = build_model(config);
    } catch (const Error& e) {
        throw FormatError(std::string("checkpoint config cannot be built: ") + e.what());
    }
    const auto& entries = model->parameters().entries();
    if (entries.size() != table.size()) {
        throw FormatError("checkpoint holds " + std::to_string(table.size()) +
                          " parameters, config implies " + std::to_string(entries.size()));
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& rec = table[i];
        const auto& entry = entries[i];
        if (rec.name != entry.name || rec.shape != entry.tensor.shape()) {
            throw FormatError("checkpoint entry " + rec.name + " " + shape_str(rec.shape) +
                              " does not match " + entry.name + " " +
                              shape_str(entry.tensor.shape()));
        }
        if (rec.offset > total || shape_numel(rec.shape) > total - rec.offset) {
            throw FormatError("checkpoint entry " + rec.name + " points outside the value block");
        }
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        Tensor t = entries[i].tensor;
        const auto dst = t.mutable_data();
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(table[i].offset), dst.size(),
                    dst.begin());
    }
    return model;
}

}  // namespace phydi
