#pragma once

#include <cctype>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "rbsde/errors.hpp"

namespace rbsde {

// Arithmetic expressions for config coefficients of 1-d problems.
// Grammar: + - * / ^ (right associative), unary minus, parentheses, numbers,
// variables, and calls abs exp log sqrt sin cos tanh min max pow.
class Expression {
public:
    // variables lists the admissible names; their position is the index into
    // the argument array of operator().
    Expression(const std::string& text, std::vector<std::string> variables)
        : text_(text), vars_(std::move(variables))
    {
        pos_ = 0;
        root_ = parse_sum();
        skip();
        if (pos_ != text_.size()) fail("unexpected '" + std::string(1, text_[pos_]) + "'");
    }

    double operator()(const std::vector<double>& values) const
    {
        require(values.size() == vars_.size(), "expression: wrong number of variables");
        return root_->eval(values);
    }

    const std::string& text() const noexcept { return text_; }

private:
    struct Node {
        virtual ~Node() = default;
        virtual double eval(const std::vector<double>& v) const = 0;
    };
    using Ptr = std::shared_ptr<const Node>;

    struct Number : Node {
        double value;
        explicit Number(double x) : value(x) {}
        double eval(const std::vector<double>&) const override { return value; }
    };
    struct Variable : Node {
        std::size_t index;
        explicit Variable(std::size_t i) : index(i) {}
        double eval(const std::vector<double>& v) const override { return v[index]; }
    };
    struct Binary : Node {
        char op;
        Ptr l, r;
        Binary(char o, Ptr a, Ptr b) : op(o), l(std::move(a)), r(std::move(b)) {}
        double eval(const std::vector<double>& v) const override
        {
            const double a = l->eval(v), b = r->eval(v);
            switch (op) {
            case '+': return a + b;
            case '-': return a - b;
            case '*': return a * b;
            case '/': return a / b;
            default: return std::pow(a, b);
            }
        }
    };
    struct Negate : Node {
        Ptr arg;
        explicit Negate(Ptr a) : arg(std::move(a)) {}
        double eval(const std::vector<double>& v) const override { return -arg->eval(v); }
    };
    struct Call : Node {
        std::function<double(const std::vector<double>&)> fn;
        std::vector<Ptr> args;
        double eval(const std::vector<double>& v) const override
        {
            std::vector<double> a;
            a.reserve(args.size());
            for (const auto& p : args) a.push_back(p->eval(v));
            return fn(a);
        }
    };

    [[noreturn]] void fail(const std::string& what) const
    {
        throw ConfigError("expression '" + text_ + "': " + what + " at position " + std::to_string(pos_));
    }

    void skip()
    {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    }

    bool accept(char c)
    {
        skip();
        if (pos_ < text_.size() && text_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    Ptr parse_sum()
    {
        Ptr left = parse_product();
        for (;;) {
            if (accept('+'))
                left = std::make_shared<Binary>('+', left, parse_product());
            else if (accept('-'))
                left = std::make_shared<Binary>('-', left, parse_product());
            else
                return left;
        }
    }

    Ptr parse_product()
    {
        Ptr left = parse_unary();
        for (;;) {
            if (accept('*'))
                left = std::make_shared<Binary>('*', left, parse_unary());
            else if (accept('/'))
                left = std::make_shared<Binary>('/', left, parse_unary());
            else
                return left;
        }
    }

    Ptr parse_unary()
    {
        if (accept('-')) return std::make_shared<Negate>(parse_unary());
        if (accept('+')) return parse_unary();
        return parse_power();
    }

    Ptr parse_power()
    {
        Ptr base = parse_atom();
        if (accept('^')) return std::make_shared<Binary>('^', base, parse_unary());
        return base;
    }

    Ptr parse_atom()
    {
        skip();
        if (pos_ >= text_.size()) fail("unexpected end");
        if (accept('(')) {
            Ptr e = parse_sum();
            if (!accept(')')) fail("expected ')'");
            return e;
        }
        const char c = text_[pos_];
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(text_.substr(pos_), &used);
            } catch (const std::exception&) {
                fail("bad number");
            }
            pos_ += used;
            return std::make_shared<Number>(v);
        }
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            const std::size_t start = pos_;
            while (pos_ < text_.size()
                   && (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_'))
                ++pos_;
            const std::string name = text_.substr(start, pos_ - start);
            if (accept('(')) return parse_call(name);
            if (name == "pi") return std::make_shared<Number>(3.14159265358979323846);
            for (std::size_t i = 0; i < vars_.size(); ++i)
                if (vars_[i] == name) return std::make_shared<Variable>(i);
            fail("unknown variable '" + name + "'");
        }
        fail("unexpected '" + std::string(1, c) + "'");
    }

    Ptr parse_call(const std::string& name)
    {
        using Fn = std::function<double(const std::vector<double>&)>;
        static const std::map<std::string, std::pair<std::size_t, Fn>> table{
            {"abs", {1, [](const std::vector<double>& a) { return std::abs(a[0]); }}},
            {"exp", {1, [](const std::vector<double>& a) { return std::exp(a[0]); }}},
            {"log", {1, [](const std::vector<double>& a) { return std::log(a[0]); }}},
            {"sqrt", {1, [](const std::vector<double>& a) { return std::sqrt(a[0]); }}},
            {"sin", {1, [](const std::vector<double>& a) { return std::sin(a[0]); }}},
            {"cos", {1, [](const std::vector<double>& a) { return std::cos(a[0]); }}},
            {"tanh", {1, [](const std::vector<double>& a) { return std::tanh(a[0]); }}},
            {"min", {2, [](const std::vector<double>& a) { return std::min(a[0], a[1]); }}},
            {"max", {2, [](const std::vector<double>& a) { return std::max(a[0], a[1]); }}},
            {"pow", {2, [](const std::vector<double>& a) { return std::pow(a[0], a[1]); }}},
        };
        auto it = table.find(name);
        if (it == table.end()) fail("unknown function '" + name + "'");
        auto call = std::make_shared<Call>();
        call->fn = it->second.second;
        if (!accept(')')) {
            do call->args.push_back(parse_sum());
            while (accept(','));
            if (!accept(')')) fail("expected ')'");
        }
        if (call->args.size() != it->second.first)
            fail(name + " takes " + std::to_string(it->second.first) + " argument(s)");
        return call;
    }

    std::string text_;
    std::vector<std::string> vars_;
    std::size_t pos_ = 0;
    Ptr root_;
};

} // namespace rbsde
