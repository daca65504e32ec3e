#include <httplib.h>

#include "esckit/backend.hpp"

namespace esckit {

namespace {

// Splits "https://host:port/base" into ("https://host:port", "/base").
std::pair<std::string, std::string> split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
    const auto path_start = url.find('/', host_start);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

class HttplibTransport : public HttpTransport {
public:
    HttpReply post(const std::string& url, const HttpHeaders& headers, const std::string& body,
                   std::chrono::milliseconds timeout) override {
        auto [origin, path] = split_url(url);
        httplib::Client client(origin);
        const auto secs = timeout.count() / 1000;
        const auto usecs = (timeout.count() % 1000) * 1000;
        client.set_connection_timeout(secs, usecs);
        client.set_read_timeout(secs, usecs);
        client.set_write_timeout(secs, usecs);

        httplib::Headers h;
        for (const auto& [k, v] : headers) h.emplace(k, v);

        HttpReply out;
        auto res = client.Post(path, h, body, "application/json");
        if (!res) {
            const auto err = res.error();
            out.failure = (err == httplib::Error::Read || err == httplib::Error::Write ||
                           err == httplib::Error::ConnectionTimeout)
                              ? TransportFailure::timeout
                              : TransportFailure::connection;
            out.error = httplib::to_string(err);
            return out;
        }
        out.status = res->status;
        out.body = res->body;
        return out;
    }
};

}  // namespace

std::shared_ptr<HttpTransport> make_default_transport() { return std::make_shared<HttplibTransport>(); }

}  // namespace esckit
