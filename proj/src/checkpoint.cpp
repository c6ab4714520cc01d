#include "fedbsd/checkpoint.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>

#include "fedbsd/errors.hpp"

namespace fedbsd {
namespace {

constexpr const char* kMagic = "fedbsd-checkpoint";
constexpr int kVersion = 1;

void write_values(std::ostream& out, char tag, std::span<const double> values) {
    out << tag;
    char buf[32];
    for (double v : values) {
        auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
        out << ' ';
        out.write(buf, end - buf);
    }
    out << '\n';
}

void write_layer(std::ostream& out, const LinearLayer& layer) {
    write_values(out, 'w', layer.weight.values());
    write_values(out, 'b', layer.bias);
}

class Reader {
public:
    explicit Reader(std::istream& in) : in_(in) {}

    std::istringstream next_line() {
        std::string line;
        if (!std::getline(in_, line)) {
            throw ConfigError("checkpoint truncated", line_no_ + 1);
        }
        ++line_no_;
        return std::istringstream(line);
    }

    void expect(std::istringstream& ls, const std::string& word) {
        std::string got;
        if (!(ls >> got) || got != word) {
            fail("expected '" + word + "', got '" + got + "'");
        }
    }

    std::size_t read_count(std::istringstream& ls) {
        long long v = -1;
        if (!(ls >> v) || v < 0) {
            fail("expected a non-negative integer");
        }
        return static_cast<std::size_t>(v);
    }

    void read_values(char tag, std::span<double> dst) {
        auto ls = next_line();
        expect(ls, std::string(1, tag));
        std::string tok;
        std::size_t k = 0;
        while (ls >> tok) {
            if (k >= dst.size()) {
                fail("too many values in '" + std::string(1, tag) + "' record");
            }
            double v = 0.0;
            auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
            if (ec != std::errc() || ptr != tok.data() + tok.size()) {
                fail("malformed number '" + tok + "'");
            }
            dst[k++] = v;
        }
        if (k != dst.size()) {
            fail("expected " + std::to_string(dst.size()) + " values, got " + std::to_string(k));
        }
    }

    [[noreturn]] void fail(const std::string& msg) const { throw ConfigError("checkpoint: " + msg, line_no_); }

private:
    std::istream& in_;
    std::size_t line_no_ = 0;
};

LinearLayer read_layer_body(Reader& r, std::size_t in, std::size_t out) {
    LinearLayer layer(in, out);
    r.read_values('w', layer.weight.values());
    r.read_values('b', layer.bias);
    return layer;
}

}  // namespace

void save_checkpoint(const SplitModel& model, std::ostream& out) {
    out << kMagic << ' ' << kVersion << '\n';
    out << "backbone " << model.backbone.layers.size() << '\n';
    for (std::size_t i = 0; i < model.backbone.layers.size(); ++i) {
        const auto& l = model.backbone.layers[i];
        out << "layer " << l.in_features() << ' ' << l.out_features() << ' '
            << (model.backbone.relu[i] ? 1 : 0) << '\n';
        write_layer(out, l);
    }
    out << "head " << model.head.feature_dim() << ' ' << model.head.num_classes() << '\n';
    write_layer(out, model.head.layer);
}

SplitModel load_checkpoint(std::istream& in) {
    Reader r(in);
    {
        auto ls = r.next_line();
        r.expect(ls, kMagic);
        if (r.read_count(ls) != static_cast<std::size_t>(kVersion)) {
            r.fail("unsupported version");
        }
    }
    SplitModel model;
    std::size_t num_layers = 0;
    {
        auto ls = r.next_line();
        r.expect(ls, "backbone");
        num_layers = r.read_count(ls);
        if (num_layers == 0) {
            r.fail("backbone must have at least one layer");
        }
    }
    for (std::size_t i = 0; i < num_layers; ++i) {
        auto ls = r.next_line();
        r.expect(ls, "layer");
        const std::size_t in_dim = r.read_count(ls);
        const std::size_t out_dim = r.read_count(ls);
        const std::size_t relu = r.read_count(ls);
        if (relu > 1) {
            r.fail("relu flag must be 0 or 1");
        }
        if (i > 0 && model.backbone.layers.back().out_features() != in_dim) {
            r.fail("backbone layer dims do not chain");
        }
        model.backbone.layers.push_back(read_layer_body(r, in_dim, out_dim));
        model.backbone.relu.push_back(relu == 1);
    }
    auto ls = r.next_line();
    r.expect(ls, "head");
    const std::size_t in_dim = r.read_count(ls);
    const std::size_t out_dim = r.read_count(ls);
    if (in_dim != model.backbone.feature_dim()) {
        r.fail("head input width does not match backbone feature width");
    }
    model.head.layer = read_layer_body(r, in_dim, out_dim);
    return model;
}

void save_checkpoint(const SplitModel& model, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw ConfigError("cannot write checkpoint " + path.string());
    }
    save_checkpoint(model, out);
}

SplitModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open checkpoint " + path.string());
    }
    return load_checkpoint(in);
}

}  // namespace fedbsd
