# utils/__init__.py
# 共用的例外類別，供資料、SCM、檢定與管線各層拋出可辨識的錯誤。
