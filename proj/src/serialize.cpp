#include "vaenar/serialize.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace vaenar {

namespace {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void put_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void put_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t get_u32(std::istream& is, const char* what) {
    std::uint32_t v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw IoError(std::string("unexpected end of file reading ") + what);
    return v;
}

std::uint64_t get_u64(std::istream& is, const char* what) {
    std::uint64_t v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw IoError(std::string("unexpected end of file reading ") + what);
    return v;
}

double get_f64(std::istream& is, const char* what) {
    double v;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v)))
        throw IoError(std::string("unexpected end of file reading ") + what);
    return v;
}

void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, const char* what) {
    std::uint32_t len = get_u32(is, what);
    std::string s(len, '\0');
    if (len && !is.read(s.data(), len))
        throw IoError(std::string("unexpected end of file reading ") + what);
    return s;
}

void put_f64_vec(std::ostream& os, const std::vector<double>& v) {
    put_u64(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> get_f64_vec(std::istream& is, const char* what) {
    std::uint64_t n = get_u64(is, what);
    std::vector<double> v(n);
    if (n && !is.read(reinterpret_cast<char*>(v.data()),
                      static_cast<std::streamsize>(n * sizeof(double))))
        throw IoError(std::string("unexpected end of file reading ") + what);
    return v;
}

void put_tensor_record(std::ostream& os, const std::string& name, const Tensor& t) {
    put_string(os, name);
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(double)));
}

std::pair<std::string, Tensor> get_tensor_record(std::istream& is) {
    std::string name = get_string(is, "tensor name");
    std::uint32_t rank = get_u32(is, "tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(get_u32(is, "tensor dim"));
    std::size_t n = shape_size(shape);
    std::vector<double> data(n);
    if (n && !is.read(reinterpret_cast<char*>(data.data()),
                      static_cast<std::streamsize>(n * sizeof(double))))
        throw IoError("unexpected end of file reading tensor data for " + name);
    return {std::move(name), Tensor::from_data(std::move(shape), std::move(data))};
}

void atomic_commit(const std::string& tmp, const std::string& path) {
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw IoError("cannot move temporary file onto " + path);
    }
}

}  // namespace

void write_vspg(const std::string& path, const Tensor& spectrogram) {
    if (spectrogram.rank() != 2) throw ShapeError("write_vspg: expected [N, n_bins]");
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp + " for writing");
        os.write("VSPG", 4);
        put_u32(os, 1);
        put_u32(os, static_cast<std::uint32_t>(spectrogram.dim(0)));
        put_u32(os, static_cast<std::uint32_t>(spectrogram.dim(1)));
        for (double v : spectrogram.data()) {
            float f = static_cast<float>(v);
            os.write(reinterpret_cast<const char*>(&f), sizeof(f));
        }
        if (!os) throw IoError("write failure on " + tmp);
    }
    atomic_commit(tmp, path);
}

Tensor read_vspg(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "VSPG", 4) != 0)
        throw IoError(path + ": not a VSPG file");
    std::uint32_t version = get_u32(is, "version");
    if (version != 1) throw IoError(path + ": unsupported VSPG version");
    int n = static_cast<int>(get_u32(is, "n_frames"));
    int bins = static_cast<int>(get_u32(is, "n_bins"));
    std::size_t count = static_cast<std::size_t>(n) * bins;
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) {
        float f;
        if (!is.read(reinterpret_cast<char*>(&f), sizeof(f)))
            throw IoError(path + ": truncated VSPG data");
        data[i] = static_cast<double>(f);
    }
    return Tensor::from_data({n, bins}, std::move(data));
}

void write_vnck(const std::string& path, const Checkpoint& ckpt) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp + " for writing");
        os.write("VNCK", 4);
        put_u32(os, ckpt.version);
        put_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
        for (const auto& [name, t] : ckpt.tensors) put_tensor_record(os, name, t);

        put_f64(os, ckpt.lr);
        put_f64(os, ckpt.beta1);
        put_f64(os, ckpt.beta2);
        put_f64(os, ckpt.eps);
        put_u64(os, ckpt.step_count);
        put_u32(os, static_cast<std::uint32_t>(ckpt.moments.size()));
        for (const auto& mr : ckpt.moments) {
            put_string(os, mr.name);
            put_f64_vec(os, mr.m);
            put_f64_vec(os, mr.v);
        }

        put_u32(os, ckpt.initial_r);
        put_u32(os, ckpt.r_step_every);
        put_u32(os, ckpt.floor_r);
        put_u32(os, ckpt.epochs_done);

        put_string(os, ckpt.config_text);
        if (!os) throw IoError("write failure on " + tmp);
    }
    atomic_commit(tmp, path);
}

Checkpoint read_vnck(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "VNCK", 4) != 0)
        throw IoError(path + ": not a VNCK file");
    Checkpoint ckpt;
    ckpt.version = get_u32(is, "version");
    if (ckpt.version != 1) throw IoError(path + ": unsupported VNCK version");
    std::uint32_t n_tensors = get_u32(is, "tensor count");
    ckpt.tensors.reserve(n_tensors);
    for (std::uint32_t i = 0; i < n_tensors; ++i) ckpt.tensors.push_back(get_tensor_record(is));

    ckpt.lr = get_f64(is, "lr");
    ckpt.beta1 = get_f64(is, "beta1");
    ckpt.beta2 = get_f64(is, "beta2");
    ckpt.eps = get_f64(is, "eps");
    ckpt.step_count = get_u64(is, "step count");
    std::uint32_t n_moments = get_u32(is, "moment count");
    ckpt.moments.reserve(n_moments);
    for (std::uint32_t i = 0; i < n_moments; ++i) {
        MomentRecord mr;
        mr.name = get_string(is, "moment name");
        mr.m = get_f64_vec(is, "first moment");
        mr.v = get_f64_vec(is, "second moment");
        ckpt.moments.push_back(std::move(mr));
    }

    ckpt.initial_r = get_u32(is, "initial_r");
    ckpt.r_step_every = get_u32(is, "r_step_every");
    ckpt.floor_r = get_u32(is, "floor_r");
    ckpt.epochs_done = get_u32(is, "epochs_done");

    ckpt.config_text = get_string(is, "config text");
    return ckpt;
}

}  // namespace vaenar
