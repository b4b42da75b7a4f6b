# services/__init__.py
# 歧視稽核流程的各個服務：資料集、SCM、反事實、距離、搜尋、檢定、偵測器與整體管線。
