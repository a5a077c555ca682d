// HTTP transport for the judge client. httplib lives only in this
// translation unit; everything else sees a single free function.

#ifdef SLM_HAVE_OPENSSL
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <chrono>
#include <string>
#include <thread>

#include "slm/error.hpp"

namespace slm::judge {

std::string judge_http_post(const std::string& base, const std::string& path,
                            const std::string& body, const std::string& api_key, int timeout_sec,
                            int max_retries, int retry_backoff_ms) {
#ifndef SLM_HAVE_OPENSSL
    if (base.rfind("https://", 0) == 0) {
        throw HttpError("https endpoint '" + base + "' needs a build with TLS support");
    }
#endif
    httplib::Client client(base);
    client.set_connection_timeout(timeout_sec, 0);
    client.set_read_timeout(timeout_sec, 0);
    client.set_write_timeout(timeout_sec, 0);
    httplib::Headers headers;
    if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);

    std::string last_failure;
    for (int attempt = 0; attempt <= max_retries; ++attempt) {
        if (attempt > 0 && retry_backoff_ms > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(retry_backoff_ms) * attempt);
        }
        httplib::Result res = client.Post(path, headers, body, "application/json");
        if (!res) {
            last_failure = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 200 && res->status < 300) return res->body;
        if (res->status >= 400 && res->status < 500) {
            // Client errors are not transient; retrying would send the same
            // rejected request again.
            throw HttpError("POST " + base + path + " failed with status " +
                            std::to_string(res->status) + ": " + res->body);
        }
        last_failure = "status " + std::to_string(res->status) + ": " + res->body;
    }
    throw HttpError("POST " + base + path + " failed after " + std::to_string(max_retries + 1) +
                    " attempts, last " + last_failure);
}

}  // namespace slm::judge
